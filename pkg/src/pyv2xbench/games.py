"""
Interference games: SINR, rate, queue and reward physics, and the environment.

One environment class covers the five learning tasks. NFIG is a one-shot
normal-form game; the SIG tasks add a CAM queue over a 50-interval horizon;
POSIG restricts each agent to a local observation.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .channel import ShadowingState, large_scale_gains, realize_gains
from .exceptions import ConfigurationError, EnvironmentStateError
from .models import (
    Action,
    ChannelParams,
    ChannelRealization,
    Dataset,
    FadingMode,
    LargeScaleGains,
    LinkRates,
    QueueState,
    RewardWeights,
    SamplingMode,
    StepOutcome,
    Task,
    TopologySnapshot,
)

logger = logging.getLogger(__name__)

_BATCH_CONSECUTIVE = 10


@dataclass(frozen=True)
class GameConfig:
    """Task-level overrides of the game definition."""

    horizon: int | None = field(
        default=None, metadata={"description": "Episode length; task default when unset"}
    )
    lambda_v2i: float | None = field(
        default=None, metadata={"description": "V2I reward weight override"}
    )
    lambda_v2v: float | None = field(
        default=None, metadata={"description": "V2V reward weight override"}
    )
    completion_bonus: float | None = field(
        default=None, metadata={"description": "Completion bonus Z override"}
    )
    rate_scale: float = field(
        default=1e7, metadata={"description": "Divisor turning bit/s into reward units"}
    )
    channel_seed: int = field(
        default=0, metadata={"description": "Seed of frozen per-topology shadowing"}
    )

    def __post_init__(self) -> None:
        if self.horizon is not None and self.horizon < 1:
            raise ConfigurationError(f"horizon must be >= 1, got {self.horizon}")
        if self.rate_scale <= 0:
            raise ConfigurationError("rate_scale must be > 0")

    def weights_for(self, task: Task) -> RewardWeights:
        """Reward weights of a task with overrides applied."""
        base = RewardWeights.nfig() if task is Task.NFIG else RewardWeights.sig()
        return RewardWeights(
            lambda_v2i=base.lambda_v2i if self.lambda_v2i is None else self.lambda_v2i,
            lambda_v2v=base.lambda_v2v if self.lambda_v2v is None else self.lambda_v2v,
            completion_bonus=(
                base.completion_bonus
                if self.completion_bonus is None
                else self.completion_bonus
            ),
            rate_scale=self.rate_scale,
        )

    def horizon_for(self, task: Task) -> int:
        if task is Task.NFIG:
            return 1
        return self.horizon or task.default_horizon


@dataclass(eq=False)
class BatchEvaluation:
    """Physics of a batch of joint actions on one realization."""

    v2i_sinr: np.ndarray
    v2v_sinr: np.ndarray
    interference: np.ndarray
    v2i_rates: np.ndarray
    v2v_rates: np.ndarray


def _as_actions(joint_actions: np.ndarray | Sequence[int], n_agents: int) -> np.ndarray:
    actions = np.asarray(joint_actions, dtype=np.int64)
    if actions.ndim == 1:
        actions = actions[None, :]
    if actions.shape[-1] != n_agents:
        raise ConfigurationError(
            f"joint action has {actions.shape[-1]} entries, expected {n_agents}"
        )
    return actions


def _transmit_powers(
    actions: np.ndarray, params: ChannelParams
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-agent subchannel, linear power, and (B, L, M) power-on-subchannel tensor."""
    n_levels = params.n_power_levels
    subchannels = actions // n_levels
    powers = params.power_levels_mw[actions % n_levels]
    occupancy = subchannels[..., None] == np.arange(params.n_subchannels)
    return subchannels, powers, occupancy * powers[..., None]


def sinr_v2i(
    joint_action: np.ndarray | Sequence[int],
    realization: ChannelRealization,
    params: ChannelParams,
) -> np.ndarray:
    """
    V2I SINR per subchannel, P^I G_m / (sigma^2 + sum_i theta_im P_i G_iBm).

    Zero on subchannels without a V2I user.

    Returns:
        (M,) array for one joint action, (B, M) for a batch
    """
    actions = _as_actions(joint_action, realization.num_v2v_links)
    _, _, tx_power = _transmit_powers(actions, params)
    interference = np.einsum("bim,im->bm", tx_power, realization.v2v_to_bs)
    sinr = (
        params.v2i_tx_power_mw
        * (realization.v2i * realization.active_subchannels)[None, :]
        / (params.noise_power_mw + interference)
    )
    return sinr[0] if np.ndim(joint_action) == 1 else sinr


def interference_v2v(
    joint_action: np.ndarray | Sequence[int],
    realization: ChannelRealization,
    params: ChannelParams,
) -> np.ndarray:
    """
    Interference power at every V2V receiver on every subchannel.

    I_im = P^I G_Bim + sum_{j != i} theta_jm P_j G_jim.

    The uplink term is dropped on subchannels without a V2I user.

    Returns:
        (L, M) array for one joint action, (B, L, M) for a batch
    """
    actions = _as_actions(joint_action, realization.num_v2v_links)
    _, _, tx_power = _transmit_powers(actions, params)
    cross = realization.v2v.copy()
    idx = np.arange(realization.num_v2v_links)
    cross[idx, idx, :] = 0.0
    interference = np.einsum("bjm,jim->bim", tx_power, cross)
    uplink = realization.bs_to_v2v * realization.active_subchannels[None, :]
    interference = interference + params.v2i_tx_power_mw * uplink[None]
    return interference[0] if np.ndim(joint_action) == 1 else interference


def sinr_v2v(
    joint_action: np.ndarray | Sequence[int],
    realization: ChannelRealization,
    params: ChannelParams,
) -> tuple[np.ndarray, np.ndarray]:
    """
    V2V SINR on each agent's chosen subchannel, P_i G_im / (sigma^2 + I_im).

    Returns:
        Tuple of the SINR ((L,) or (B, L)) and the full interference tensor
        ((L, M) or (B, L, M))
    """
    actions = _as_actions(joint_action, realization.num_v2v_links)
    subchannels, powers, _ = _transmit_powers(actions, params)
    interference = interference_v2v(actions, realization, params)
    direct = realization.direct
    idx = np.arange(realization.num_v2v_links)
    gain = direct[idx[None, :], subchannels]
    own_interference = np.take_along_axis(interference, subchannels[..., None], axis=2)[
        ..., 0
    ]
    sinr = powers * gain / (params.noise_power_mw + own_interference)
    if np.ndim(joint_action) == 1:
        return sinr[0], interference[0]
    return sinr, interference


def link_rates(sinr: np.ndarray | float, params: ChannelParams) -> np.ndarray:
    """Shannon rate W log2(1 + SINR) in bits/s."""
    return params.subchannel_bandwidth * np.log2(1.0 + np.asarray(sinr, dtype=float))


def cam_rate(rate: np.ndarray | float, params: ChannelParams) -> np.ndarray:
    """V2V rate expressed in CAMs per second."""
    return np.asarray(rate, dtype=float) / params.cam_size_bits


def queue_step(queue: QueueState, cams_per_second: np.ndarray, dt: float) -> QueueState:
    """
    Advance the CAM queue by one communication interval.

    The interval starting at t=0 leaves every queue at 1; later intervals
    drain q by the delivered CAMs, floored at zero.
    """
    if queue.t == 0:
        q = np.ones_like(queue.q, dtype=float)
    else:
        q = np.maximum(0.0, queue.q - np.asarray(cams_per_second) * dt)
    return QueueState(q=q, t=queue.t + 1)


def reward_nfig(
    v2i_rates: np.ndarray, v2v_rates: np.ndarray, weights: RewardWeights
) -> np.ndarray:
    """lambda1 * sum_m r_m + lambda2 * sum_i r_i, rates in reward units."""
    scale = weights.rate_scale
    return (
        weights.lambda_v2i * np.sum(np.asarray(v2i_rates) / scale, axis=-1)
        + weights.lambda_v2v * np.sum(np.asarray(v2v_rates) / scale, axis=-1)
    )


def reward_sig(
    v2i_rates: np.ndarray,
    v2v_rates: np.ndarray,
    q: np.ndarray,
    weights: RewardWeights,
) -> np.ndarray:
    """
    NFIG reward restricted to links with pending CAMs, plus Z per empty queue.

    ``q`` is the queue at the start of the interval.
    """
    scale = weights.rate_scale
    pending = np.asarray(q) > 0
    v2v_term = np.sum(np.where(pending, np.asarray(v2v_rates) / scale, 0.0), axis=-1)
    bonus = weights.completion_bonus * np.sum(~pending, axis=-1)
    return (
        weights.lambda_v2i * np.sum(np.asarray(v2i_rates) / scale, axis=-1)
        + weights.lambda_v2v * v2v_term
        + bonus
    )


def evaluate_batch(
    joint_actions: np.ndarray, realization: ChannelRealization, params: ChannelParams
) -> BatchEvaluation:
    """SINRs, interference and rates for a (B, L) batch of joint actions."""
    actions = _as_actions(joint_actions, realization.num_v2v_links)
    v2i = sinr_v2i(actions, realization, params)
    v2v, interference = sinr_v2v(actions, realization, params)
    return BatchEvaluation(
        v2i_sinr=v2i,
        v2v_sinr=v2v,
        interference=interference,
        v2i_rates=link_rates(v2i, params),
        v2v_rates=link_rates(v2v, params),
    )


def evaluate_joint_actions(
    joint_actions: np.ndarray,
    realization: ChannelRealization,
    params: ChannelParams,
    weights: RewardWeights,
    queue: QueueState | None = None,
) -> np.ndarray:
    """
    Common reward of every joint action in a (B, L) batch.

    Uses the NFIG reward when ``queue`` is None and the SIG reward otherwise.
    """
    batch = evaluate_batch(joint_actions, realization, params)
    if queue is None:
        return reward_nfig(batch.v2i_rates, batch.v2v_rates, weights)
    return reward_sig(batch.v2i_rates, batch.v2v_rates, queue.q[None, :], weights)


def encode_gain(gain: np.ndarray) -> np.ndarray:
    """Gain feature (10 log10 G + 120) / 60 clipped to [0, 2]."""
    with np.errstate(divide="ignore"):
        db = 10.0 * np.log10(np.asarray(gain, dtype=float))
    return np.clip((db + 120.0) / 60.0, 0.0, 2.0)


def encode_interference(interference: np.ndarray, noise_power_mw: float) -> np.ndarray:
    """Interference feature 10 log10(I / sigma^2) / 60 clipped to [0, 2]."""
    with np.errstate(divide="ignore"):
        db = 10.0 * np.log10(np.asarray(interference, dtype=float) / noise_power_mw)
    return np.clip(db / 60.0, 0.0, 2.0)


def global_state_dim(num_v2v_links: int, n_subchannels: int) -> int:
    return n_subchannels * (num_v2v_links + 1) ** 2 + num_v2v_links + 1


def local_observation_dim(n_subchannels: int) -> int:
    return 3 * n_subchannels + 2


def observe_global(
    realization: ChannelRealization, queue: QueueState, horizon: int
) -> np.ndarray:
    """Encoded gain tensors, queue lengths and normalized time."""
    return np.concatenate(
        [
            encode_gain(realization.v2v).ravel(),
            encode_gain(realization.bs_to_v2v).ravel(),
            encode_gain(realization.v2v_to_bs).ravel(),
            encode_gain(realization.v2i).ravel(),
            np.asarray(queue.q, dtype=float),
            [queue.t / horizon],
        ]
    )


def observe_local(
    realization: ChannelRealization,
    queue: QueueState,
    horizon: int,
    previous_interference: np.ndarray,
    agent: int,
    noise_power_mw: float,
) -> np.ndarray:
    """Agent-local view: own direct and to-BS gains, last interference, q_i and t."""
    return np.concatenate(
        [
            encode_gain(realization.direct[agent]),
            encode_gain(realization.v2v_to_bs[agent]),
            encode_interference(previous_interference[agent], noise_power_mw),
            [float(queue.q[agent])],
            [queue.t / horizon],
        ]
    )


class TopologySource:
    """Supplies the topology of each episode: fixed, or drawn from a dataset."""

    def __init__(
        self,
        snapshots: Sequence[TopologySnapshot],
        sampling_mode: SamplingMode = SamplingMode.RANDOM,
        fixed: bool = False,
    ) -> None:
        self.snapshots = list(snapshots)
        self.sampling_mode = sampling_mode
        self.fixed = fixed
        self._cursor = 0
        self._batch_left = 0

    @classmethod
    def single(cls, snapshot: TopologySnapshot) -> TopologySource:
        return cls([snapshot], fixed=True)

    @classmethod
    def from_dataset(
        cls, dataset: Dataset, sampling_mode: SamplingMode | None = None
    ) -> TopologySource:
        return cls(dataset.snapshots, sampling_mode or dataset.sampling_mode)

    def __len__(self) -> int:
        return len(self.snapshots)

    def next(self, rng: np.random.Generator) -> TopologySnapshot:
        """
        Draw the next episode topology.

        Raises:
            EnvironmentStateError: If the source holds no topologies
        """
        if not self.snapshots:
            raise EnvironmentStateError("topology source is empty")
        if self.fixed or len(self.snapshots) == 1:
            return self.snapshots[0]
        n = len(self.snapshots)
        if self.sampling_mode is SamplingMode.RANDOM:
            return self.snapshots[int(rng.integers(n))]
        if self.sampling_mode is SamplingMode.CONSECUTIVE_BATCHES and self._batch_left == 0:
            self._cursor = int(rng.integers(n))
            self._batch_left = _BATCH_CONSECUTIVE
        snapshot = self.snapshots[self._cursor % n]
        self._cursor = (self._cursor + 1) % n
        self._batch_left = max(0, self._batch_left - 1)
        return snapshot


class Policy(Protocol):
    """Anything that picks a joint action from the current environment state."""

    def act(self, env: InterferenceGameEnv) -> np.ndarray: ...


class InterferenceGameEnv:
    """
    Multi-agent interference game environment.

    Each V2V link is an agent choosing a (subchannel, power level) action
    encoded as ``subchannel * |A_P| + power_level``. All agents receive the
    same reward.
    """

    def __init__(
        self,
        task: Task,
        source: TopologySource,
        params: ChannelParams | None = None,
        game: GameConfig | None = None,
        seed: int | None = None,
    ) -> None:
        """
        Initialize the environment.

        Args:
            task: Learning task
            source: Topology supply
            params: Channel parameters
            game: Horizon, reward weight and shadowing seed overrides
            seed: Seed of the environment's random stream
        """
        self.task = task
        self.source = source
        self.params = params or ChannelParams()
        self.game = game or GameConfig()
        self.weights = self.game.weights_for(task)
        self.horizon = self.game.horizon_for(task)
        self.fading_mode = FadingMode.FF if task.fast_fading else FadingMode.NFF
        self.rng = np.random.default_rng(seed)

        self.topology: TopologySnapshot | None = None
        self.gains: LargeScaleGains | None = None
        self.realization: ChannelRealization | None = None
        self.queue = QueueState.initial(0)
        self.previous_interference = np.zeros((0, self.params.n_subchannels))
        self.done = True
        self._shadow: ShadowingState | None = None
        self._gain_cache: dict[tuple[int, bytes], LargeScaleGains] = {}

    @property
    def n_agents(self) -> int:
        if self.topology is not None:
            return self.topology.num_v2v_links
        return self.source.snapshots[0].num_v2v_links if len(self.source) else 0

    @property
    def n_actions(self) -> int:
        return self.params.n_actions

    @property
    def state_dim(self) -> int:
        return global_state_dim(self.n_agents, self.params.n_subchannels)

    @property
    def obs_dim(self) -> int:
        if self.task.partially_observable:
            return local_observation_dim(self.params.n_subchannels)
        return self.state_dim

    def _uses_frozen_shadowing(self, pinned: bool) -> bool:
        return pinned or self.source.fixed or self.task.is_single_location

    def _gains_for(self, topology: TopologySnapshot, pinned: bool) -> LargeScaleGains:
        if self._uses_frozen_shadowing(pinned):
            key = (topology.sample_id, topology.positions().tobytes())
            if key not in self._gain_cache:
                shadow = ShadowingState.frozen(topology, self.params, self.game.channel_seed)
                self._gain_cache[key] = large_scale_gains(topology, self.params, shadow)
            return self._gain_cache[key]

        if self._shadow is None or self.topology is None:
            self._shadow = ShadowingState.initial(
                topology.num_v2v_links, topology.num_v2i_links, self.params, self.rng
            )
        else:
            self._shadow = self._shadow.advance(self.topology, topology, self.params, self.rng)
        return large_scale_gains(topology, self.params, self._shadow)

    def reset(
        self, topology: TopologySnapshot | None = None, seed: int | None = None
    ) -> np.ndarray:
        """
        Start an episode and return the per-agent observations.

        Args:
            topology: Pin the episode to this topology (frozen shadowing)
            seed: Re-seed the environment's random stream

        Raises:
            EnvironmentStateError: If the topology source is empty
        """
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        pinned = topology is not None
        snapshot = topology if topology is not None else self.source.next(self.rng)
        self.gains = self._gains_for(snapshot, pinned)
        self.topology = snapshot
        self.queue = QueueState.initial(snapshot.num_v2v_links)
        self.previous_interference = np.full(
            (snapshot.num_v2v_links, self.params.n_subchannels), self.params.noise_power_mw
        )
        self.realization = realize_gains(
            self.gains, self.params.n_subchannels, self.fading_mode, self.rng
        )
        self.done = False
        return self.observations

    @property
    def global_state(self) -> np.ndarray:
        self._require_episode()
        assert self.realization is not None
        return observe_global(self.realization, self.queue, self.horizon)

    def observe_local(self, agent: int) -> np.ndarray:
        self._require_episode()
        assert self.realization is not None
        return observe_local(
            self.realization,
            self.queue,
            self.horizon,
            self.previous_interference,
            agent,
            self.params.noise_power_mw,
        )

    @property
    def observations(self) -> np.ndarray:
        """(L, obs_dim) per-agent inputs; the global state repeated unless POSIG."""
        if self.task.partially_observable:
            return np.stack([self.observe_local(i) for i in range(self.n_agents)])
        return np.tile(self.global_state, (self.n_agents, 1))

    def _require_episode(self) -> None:
        if self.realization is None:
            raise EnvironmentStateError("environment has not been reset")

    def step(self, joint_action: np.ndarray | Sequence[int]) -> StepOutcome:
        """
        Apply a joint action for one communication interval.

        Raises:
            EnvironmentStateError: If the episode is already done
        """
        self._require_episode()
        if self.done:
            raise EnvironmentStateError("step called on a finished episode")
        assert self.realization is not None and self.gains is not None
        actions = np.asarray(joint_action, dtype=np.int64)
        if actions.shape != (self.n_agents,) or np.any(
            (actions < 0) | (actions >= self.n_actions)
        ):
            raise ConfigurationError(f"invalid joint action {actions.tolist()}")

        batch = evaluate_batch(actions, self.realization, self.params)
        v2i_rates, v2v_rates = batch.v2i_rates[0], batch.v2v_rates[0]
        if self.task is Task.NFIG:
            reward = float(reward_nfig(v2i_rates, v2v_rates, self.weights))
        else:
            reward = float(reward_sig(v2i_rates, v2v_rates, self.queue.q, self.weights))

        self.queue = queue_step(
            self.queue, cam_rate(v2v_rates, self.params), self.params.communication_interval
        )
        self.previous_interference = batch.interference[0]
        self.done = self.queue.t >= self.horizon
        if not self.done and self.fading_mode is FadingMode.FF:
            self.realization = realize_gains(
                self.gains, self.params.n_subchannels, self.fading_mode, self.rng
            )
        observations = self.observations
        return StepOutcome(
            reward=reward,
            rewards=np.full(self.n_agents, reward),
            rates=LinkRates(v2i=v2i_rates, v2v=v2v_rates),
            v2v_sinr=batch.v2v_sinr[0],
            interference=batch.interference[0],
            global_state=self.global_state,
            observations=observations,
            done=self.done,
            t=self.queue.t,
        )

    def silent_action(self) -> np.ndarray:
        """Joint action with every agent at the -100 dBm level on subchannel 0."""
        index = Action(0, self.params.silent_power_level).index(self.params.n_power_levels)
        return np.full(self.n_agents, index, dtype=np.int64)


def run_episode(
    env: InterferenceGameEnv,
    policy: Policy,
    topology: TopologySnapshot | None = None,
    seed: int | None = None,
) -> float:
    """Play one episode and return its undiscounted return."""
    env.reset(topology=topology, seed=seed)
    total = 0.0
    while not env.done:
        total += env.step(policy.act(env)).reward
    return total
