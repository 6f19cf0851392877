"""
Oracle and random baselines, normalization bounds and equilibrium analysis.

Exhaustive search evaluates every joint action with the vectorized game
physics; the greedy assignment is the fallback above the enumeration guard.
Pure Nash equilibria of the one-shot game are read off the full payoff
tensor and summarized by the coordination difficulty score.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import tempfile
from collections.abc import Callable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy import stats

from .exceptions import DegenerateBoundsError, EnumerationLimitError
from .games import (
    BatchEvaluation,
    InterferenceGameEnv,
    Policy,
    evaluate_batch,
    reward_nfig,
    reward_sig,
    run_episode,
)
from .models import (
    Action,
    CdsReport,
    ChannelParams,
    ChannelRealization,
    EquilibriumSet,
    NormalizationBounds,
    QueueState,
    ReturnEstimate,
    RewardWeights,
    Task,
    TopologySnapshot,
)

logger = logging.getLogger(__name__)

ENUMERATION_LIMIT = 4
GREEDY_SWEEPS_PER_AGENT = 16
_CHUNK = 1 << 14

# Maps a batch of evaluated joint actions to lexicographic ranking keys.
Objective = Callable[[BatchEvaluation], tuple[np.ndarray, ...]]


def reward_objective(
    weights: RewardWeights, queue: QueueState | None = None
) -> Objective:
    """Rank joint actions by the common reward (NFIG reward when ``queue`` is None)."""

    def keys(batch: BatchEvaluation) -> tuple[np.ndarray, ...]:
        if queue is None:
            return (reward_nfig(batch.v2i_rates, batch.v2v_rates, weights),)
        return (reward_sig(batch.v2i_rates, batch.v2v_rates, queue.q[None, :], weights),)

    return keys


def throughput_objective(queue: QueueState | None = None) -> Objective:
    """Rank joint actions by total V2V throughput of links with pending CAMs."""

    def keys(batch: BatchEvaluation) -> tuple[np.ndarray, ...]:
        rates = batch.v2v_rates
        if queue is not None:
            rates = np.where(queue.q[None, :] > 0, rates, 0.0)
        return (rates.sum(axis=-1),)

    return keys


def sig_oracle_objective(weights: RewardWeights, queue: QueueState) -> Objective:
    """Pending-link V2V throughput first, the SIG step reward second."""
    throughput = throughput_objective(queue)
    reward = reward_objective(weights, queue)

    def keys(batch: BatchEvaluation) -> tuple[np.ndarray, ...]:
        return throughput(batch) + reward(batch)

    return keys


def _lexargmax(keys: tuple[np.ndarray, ...]) -> int:
    """Index maximizing the keys lexicographically; lowest index on exact ties."""
    mask = np.ones(keys[0].shape[0], dtype=bool)
    for key in keys:
        best = key[mask].max()
        mask &= key == best
    return int(np.flatnonzero(mask)[0])


def iter_joint_actions(
    n_agents: int, n_actions: int, chunk: int = _CHUNK
) -> Iterator[np.ndarray]:
    """All joint actions in lexicographic order, in (B, L) chunks."""
    total = n_actions**n_agents
    shape = (n_actions,) * n_agents
    for start in range(0, total, chunk):
        flat = np.arange(start, min(start + chunk, total))
        yield np.stack(np.unravel_index(flat, shape), axis=1).astype(np.int64)


def _check_enumerable(n_agents: int, max_agents: int) -> None:
    if n_agents > max_agents:
        raise EnumerationLimitError(
            f"exhaustive search over {n_agents} agents exceeds the guard of {max_agents}",
            {"n_agents": n_agents, "max_agents": max_agents},
        )


def exhaustive_search(
    realization: ChannelRealization,
    params: ChannelParams,
    objective: Objective,
    max_agents: int = ENUMERATION_LIMIT,
) -> tuple[np.ndarray, tuple[float, ...]]:
    """
    Exact lexicographic argmax of ``objective`` over every joint action.

    Raises:
        EnumerationLimitError: If L exceeds ``max_agents``
    """
    n_agents = realization.num_v2v_links
    _check_enumerable(n_agents, max_agents)
    best_action: np.ndarray | None = None
    best_keys: tuple[float, ...] | None = None
    for actions in iter_joint_actions(n_agents, params.n_actions):
        keys = objective(evaluate_batch(actions, realization, params))
        idx = _lexargmax(keys)
        candidate = tuple(float(k[idx]) for k in keys)
        if best_keys is None or candidate > best_keys:
            best_action, best_keys = actions[idx], candidate
    assert best_action is not None and best_keys is not None
    return best_action.copy(), best_keys


def exhaustive_best_joint_action(
    realization: ChannelRealization,
    params: ChannelParams,
    weights: RewardWeights,
    queue: QueueState | None = None,
    max_agents: int = ENUMERATION_LIMIT,
) -> tuple[np.ndarray, float]:
    """
    Joint action maximizing the one-step common reward, and that reward.

    Ties go to the lexicographically smallest joint action.
    """
    action, keys = exhaustive_search(
        realization, params, reward_objective(weights, queue), max_agents
    )
    return action, keys[0]


@dataclass
class GreedyResult:
    """Outcome of the greedy iterative assignment."""

    joint_action: np.ndarray
    value: tuple[float, ...]
    sweeps: int
    converged: bool = True


def greedy_iterative_assignment(
    realization: ChannelRealization,
    params: ChannelParams,
    objective: Objective | None = None,
    max_sweeps: int | None = None,
) -> GreedyResult:
    """
    Sequential best-response assignment.

    All agents start silent. Agents are visited in index order and each
    switches to the action maximizing the objective given the others'
    current actions, but only on strict improvement; ties go to the lowest
    action index (lower subchannel, then lower power index). Sweeps repeat
    until a full pass changes nothing, at most ``max_sweeps`` times (16 L by
    default); hitting the cap logs a warning and marks the result unconverged.
    """
    objective = objective or throughput_objective()
    n_agents = realization.num_v2v_links
    silent = Action(0, params.silent_power_level).index(params.n_power_levels)
    current = np.full(n_agents, silent, dtype=np.int64)
    current_value = tuple(
        float(k[0]) for k in objective(evaluate_batch(current, realization, params))
    )
    candidates = np.arange(params.n_actions, dtype=np.int64)
    limit = max_sweeps or GREEDY_SWEEPS_PER_AGENT * max(n_agents, 1)
    sweeps = 0
    changed = True
    while changed and sweeps < limit:
        changed = False
        sweeps += 1
        for agent in range(n_agents):
            batch = np.tile(current, (params.n_actions, 1))
            batch[:, agent] = candidates
            keys = objective(evaluate_batch(batch, realization, params))
            idx = _lexargmax(keys)
            value = tuple(float(k[idx]) for k in keys)
            if value > current_value:
                current, current_value = batch[idx].copy(), value
                changed = True
        logger.debug(f"Greedy sweep {sweeps}: value {current_value}")
    if changed:
        logger.warning(
            f"Greedy assignment stopped at the {limit}-sweep cap before converging"
        )
    return GreedyResult(
        joint_action=current, value=current_value, sweeps=sweeps, converged=not changed
    )


class RandomPolicy:
    """Uniform i.i.d. actions for every agent."""

    def __init__(self, rng: np.random.Generator | int | None = None) -> None:
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)

    def act(self, env: InterferenceGameEnv) -> np.ndarray:
        return self.rng.integers(env.n_actions, size=env.n_agents)


class OraclePolicy:
    """
    Per-step oracle with full knowledge of the current channel realization.

    NFIG maximizes the one-shot reward; SIG tasks maximize the throughput of
    links with pending CAMs, then the step reward. Above the enumeration
    guard, or in greedy mode, the greedy assignment is used instead.
    """

    def __init__(self, mode: str = "exhaustive", max_agents: int = ENUMERATION_LIMIT) -> None:
        if mode not in ("exhaustive", "greedy"):
            raise ValueError(f"unknown oracle mode {mode!r}")
        self.mode = mode
        self.max_agents = max_agents

    def act(self, env: InterferenceGameEnv) -> np.ndarray:
        assert env.realization is not None
        if env.task is Task.NFIG:
            objective = reward_objective(env.weights)
        else:
            objective = sig_oracle_objective(env.weights, env.queue)
        if self.mode == "greedy" or env.n_agents > self.max_agents:
            return greedy_iterative_assignment(
                env.realization, env.params, objective
            ).joint_action
        action, _ = exhaustive_search(env.realization, env.params, objective, self.max_agents)
        return action


def _estimate(returns: Sequence[float]) -> ReturnEstimate:
    values = np.asarray(returns, dtype=float)
    stderr = float(values.std(ddof=1) / math.sqrt(values.size)) if values.size > 1 else 0.0
    return ReturnEstimate(mean=float(values.mean()), stderr=stderr, n_episodes=int(values.size))


def policy_returns(
    env: InterferenceGameEnv,
    policy: Policy,
    n_episodes: int,
    topology: TopologySnapshot | None = None,
    seed: int = 0,
) -> list[float]:
    """Returns of ``n_episodes`` episodes; the environment stream is re-seeded once."""
    env.rng = np.random.default_rng([seed, 0])
    return [run_episode(env, policy, topology) for _ in range(n_episodes)]


def random_policy_return(
    env: InterferenceGameEnv,
    n_episodes: int = 200,
    seed: int = 0,
    topology: TopologySnapshot | None = None,
) -> ReturnEstimate:
    """Mean return of the uniform-random policy with its standard error."""
    policy = RandomPolicy(np.random.default_rng([seed, 1]))
    return _estimate(policy_returns(env, policy, n_episodes, topology, seed))


def oracle_return(
    env: InterferenceGameEnv,
    mode: str = "exhaustive",
    n_episodes: int = 1,
    topology: TopologySnapshot | None = None,
    seed: int = 0,
) -> ReturnEstimate:
    """Mean return of the oracle policy."""
    return _estimate(policy_returns(env, OraclePolicy(mode), n_episodes, topology, seed))


def sig_sl_oracle_return(
    env: InterferenceGameEnv,
    mode: str = "exhaustive",
    topology: TopologySnapshot | None = None,
    seed: int = 0,
) -> float:
    """Return of one oracle-controlled episode on a single-location SIG task."""
    return oracle_return(env, mode, 1, topology, seed).mean


def normalize_return(
    g: float | np.ndarray, bounds: NormalizationBounds
) -> float | np.ndarray:
    """
    Affine map sending g_min to 0 and g_max to 1.

    Raises:
        DegenerateBoundsError: If g_max <= g_min
    """
    if bounds.degenerate:
        raise DegenerateBoundsError(
            f"degenerate bounds for {bounds.task.value}/{bounds.topology_id}: "
            f"g_min={bounds.g_min}, g_max={bounds.g_max}",
            bounds.to_dict(),
        )
    result = (np.asarray(g, dtype=float) - bounds.g_min) / (bounds.g_max - bounds.g_min)
    return float(result) if np.ndim(result) == 0 else result


def nfig_payoff_tensor(
    realization: ChannelRealization,
    params: ChannelParams,
    weights: RewardWeights,
    max_agents: int = ENUMERATION_LIMIT,
) -> np.ndarray:
    """Common NFIG payoff of every joint action, shape (|A|,) * L."""
    n_agents = realization.num_v2v_links
    _check_enumerable(n_agents, max_agents)
    values = [
        reward_nfig(batch.v2i_rates, batch.v2v_rates, weights)
        for batch in (
            evaluate_batch(actions, realization, params)
            for actions in iter_joint_actions(n_agents, params.n_actions)
        )
    ]
    return np.concatenate(values).reshape((params.n_actions,) * n_agents)


def enumerate_pure_nash(
    payoff: np.ndarray,
    bounds: NormalizationBounds | None = None,
    topology_id: str = "",
) -> EquilibriumSet:
    """
    All pure equilibria of a common-payoff game.

    A joint action is an equilibrium when it attains the maximum along every
    agent's axis. Returns are normalized with ``bounds`` when given.
    """
    mask = np.ones(payoff.shape, dtype=bool)
    for axis in range(payoff.ndim):
        mask &= payoff == payoff.max(axis=axis, keepdims=True)
    joint = [tuple(int(a) for a in idx) for idx in np.argwhere(mask)]
    raw = [float(payoff[idx]) for idx in joint]
    if bounds is not None:
        normalized = [float(normalize_return(g, bounds)) for g in raw]
    else:
        normalized = list(raw)
    if not joint:
        logger.warning(f"No pure equilibrium found for {topology_id or 'payoff tensor'}")
    return EquilibriumSet(
        joint_actions=joint, returns=normalized, raw_returns=raw, topology_id=topology_id
    )


def verify_equilibrium(payoff: np.ndarray, joint_action: Sequence[int]) -> bool:
    """Independent unilateral-deviation check of one joint action."""
    base = tuple(int(a) for a in joint_action)
    value = payoff[base]
    for agent in range(payoff.ndim):
        for alternative in range(payoff.shape[agent]):
            deviation = list(base)
            deviation[agent] = alternative
            if payoff[tuple(deviation)] > value:
                return False
    return True


def coordination_difficulty_score(
    eq_set: EquilibriumSet, topology_id: str | None = None
) -> CdsReport:
    """
    d = (G_max - G_min) / G_max + (1 - G_mean) / G_max over normalized equilibrium returns.

    Raises:
        DegenerateBoundsError: If the set is empty or G_max <= 0
    """
    name = topology_id if topology_id is not None else eq_set.topology_id
    if eq_set.empty:
        raise DegenerateBoundsError(f"empty equilibrium set for {name}")
    g_max, g_min, g_mean = eq_set.g_ne_max, eq_set.g_ne_min, eq_set.g_ne_mean
    if g_max <= 0:
        raise DegenerateBoundsError(
            f"non-positive best equilibrium return {g_max} for {name}",
            {"g_ne_max": g_max},
        )
    score = (g_max - g_min) / g_max + (1.0 - g_mean) / g_max
    return CdsReport(
        topology_id=name,
        score=float(score),
        equilibrium_count=len(eq_set.joint_actions),
        g_ne_max=g_max,
        g_ne_min=g_min,
        g_ne_mean=g_mean,
    )


def cds_performance_correlation(
    cds_values: Sequence[float], performances: Sequence[float]
) -> tuple[float, float]:
    """Spearman rank correlation (rho, p-value) between CDS and learned performance."""
    result = stats.spearmanr(cds_values, performances)
    return float(result.statistic), float(result.pvalue)


def bounds_key(
    task: Task,
    topology_id: str,
    num_v2v_links: int,
    num_v2i_links: int,
    inputs: Mapping[str, Any] | None = None,
) -> str:
    """
    Cache key of one set of normalization bounds.

    ``inputs`` holds the remaining settings the bounds depend on (seeds,
    channel and game parameters, vehicle positions); the first 16 hex digits
    of their SHA-256 digest are appended to the key.
    """
    key = f"{task.value}|{topology_id}|L{num_v2v_links}|M{num_v2i_links}"
    if inputs is None:
        return key
    payload = json.dumps(inputs, sort_keys=True, default=str)
    return f"{key}|{hashlib.sha256(payload.encode()).hexdigest()[:16]}"


class BoundsCache:
    """
    JSON-backed store of normalization bounds.

    Writes go through a temporary file and an atomic rename so concurrent
    readers never see a partial file.
    """

    def __init__(self, path: str | Path | None = None) -> None:
        self.path = Path(path) if path is not None else None
        self._entries: dict[str, NormalizationBounds] = {}
        if self.path is not None and self.path.exists():
            data = json.loads(self.path.read_text())
            self._entries = {k: NormalizationBounds.from_dict(v) for k, v in data.items()}

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def get(self, key: str) -> NormalizationBounds | None:
        return self._entries.get(key)

    def put(self, key: str, bounds: NormalizationBounds) -> None:
        self._entries[key] = bounds
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        payload = json.dumps(
            {k: v.to_dict() for k, v in sorted(self._entries.items())}, indent=2
        )
        fd, tmp = tempfile.mkstemp(dir=self.path.parent, suffix=".tmp")
        with os.fdopen(fd, "w") as handle:
            handle.write(payload)
        os.replace(tmp, self.path)

    def get_or_compute(
        self, key: str, compute: Callable[[], NormalizationBounds]
    ) -> NormalizationBounds:
        cached = self.get(key)
        if cached is not None:
            return cached
        bounds = compute()
        self.put(key, bounds)
        return bounds


def single_location_bounds(
    env: InterferenceGameEnv,
    topology: TopologySnapshot,
    n_random_episodes: int = 200,
    n_oracle_episodes: int = 9,
    seed: int = 0,
) -> NormalizationBounds:
    """
    Bounds of an NFIG or SIG single-location task on one topology.

    Without fast fading the oracle episode is deterministic and played once.
    """
    oracle_episodes = n_oracle_episodes if env.task.fast_fading else 1
    g_max = oracle_return(env, "exhaustive", oracle_episodes, topology, seed).mean
    g_min = random_policy_return(env, n_random_episodes, seed, topology)
    bounds = NormalizationBounds(
        g_min=g_min.mean,
        g_max=g_max,
        task=env.task,
        topology_id=topology.topology_id,
        g_min_stderr=g_min.stderr,
        n_random_episodes=g_min.n_episodes,
    )
    _log_bounds(bounds)
    return bounds


def multi_location_bounds(
    env: InterferenceGameEnv,
    sl_nff_env: InterferenceGameEnv,
    topologies: Sequence[TopologySnapshot],
    n_random_episodes: int = 200,
    seed: int = 0,
) -> NormalizationBounds:
    """
    Bounds of SIG ML / POSIG over the evaluation topologies.

    g_max is the mean SIG SL_NFF oracle return over the topologies; g_min the
    random-policy return with episodes spread evenly across them.
    """
    g_max = float(
        np.mean([sig_sl_oracle_return(sl_nff_env, "exhaustive", t, seed) for t in topologies])
    )
    policy = RandomPolicy(np.random.default_rng([seed, 1]))
    env.rng = np.random.default_rng([seed, 0])
    returns = [
        run_episode(env, policy, topologies[k % len(topologies)])
        for k in range(n_random_episodes)
    ]
    g_min = _estimate(returns)
    bounds = NormalizationBounds(
        g_min=g_min.mean,
        g_max=g_max,
        task=env.task,
        topology_id="test_set",
        g_min_stderr=g_min.stderr,
        n_random_episodes=g_min.n_episodes,
    )
    _log_bounds(bounds)
    return bounds


def _log_bounds(bounds: NormalizationBounds) -> None:
    logger.info(
        f"Bounds {bounds.task.value}/{bounds.topology_id}: "
        f"g_min={bounds.g_min:.4f} (±{bounds.g_min_stderr:.4f}), g_max={bounds.g_max:.4f}"
    )
    if bounds.degenerate:
        logger.warning(f"Degenerate bounds for {bounds.task.value}/{bounds.topology_id}")


@dataclass
class AblationResult:
    """Normalized returns of one policy on training samples and held-out topologies."""

    train_returns: list[float] = field(default_factory=list)
    test_returns: list[float] = field(default_factory=list)
    train_normalized: float = math.nan
    test_normalized: float = math.nan

    @property
    def gap(self) -> float:
        """Train minus held-out normalized return."""
        return self.train_normalized - self.test_normalized


def robustness_ablation(
    policy: Policy,
    env: InterferenceGameEnv,
    train_topologies: Sequence[TopologySnapshot],
    test_topologies: Sequence[TopologySnapshot],
    bounds: NormalizationBounds,
    seed: int = 0,
) -> AblationResult:
    """Evaluate one policy on in-training samples and on held-out topologies."""
    env.rng = np.random.default_rng([seed, 2])
    train = [run_episode(env, policy, t) for t in train_topologies]
    env.rng = np.random.default_rng([seed, 2])
    test = [run_episode(env, policy, t) for t in test_topologies]
    return AblationResult(
        train_returns=train,
        test_returns=test,
        train_normalized=float(normalize_return(float(np.mean(train)), bounds)),
        test_normalized=float(normalize_return(float(np.mean(test)), bounds)),
    )
