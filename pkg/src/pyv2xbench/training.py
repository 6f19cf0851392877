"""
Training loop with interleaved noise-free evaluation.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .algorithms import GreedyEnsemblePolicy, Hyperparameters, Learner, build_ensemble
from .evaluation import CHECKPOINT_FILE, LOG_FILE, evaluate_policy, records_frame
from .exceptions import ConfigurationError, TrainingDivergedError
from .games import InterferenceGameEnv
from .micronet import load_checkpoint, save_checkpoint
from .models import Algorithm, EvaluationRecord, NormalizationBounds, Task, TopologySnapshot

logger = logging.getLogger(__name__)

N_EVALUATIONS = 100
_ENV_STREAM = 10
_LEARNER_STREAM = 11


@dataclass
class TrainingResult:
    """Outputs of one training run."""

    learner: Learner
    records: list[EvaluationRecord] = field(default_factory=list)
    episodes: int = 0
    log_path: Path | None = None
    checkpoint_path: Path | None = None


def evaluation_schedule(episodes: int, n_evaluations: int = N_EVALUATIONS) -> list[int]:
    """
    Episode counts after which evaluation runs, evenly spaced and ending at ``episodes``.

    Raises:
        ConfigurationError: If the budget has fewer episodes than evaluation points
    """
    if episodes < n_evaluations:
        raise ConfigurationError(
            f"episode budget {episodes} is smaller than {n_evaluations} evaluation points"
        )
    return [round((k + 1) * episodes / n_evaluations) for k in range(n_evaluations)]


def _write_log(records: Sequence[EvaluationRecord], out_dir: Path | None) -> Path | None:
    if out_dir is None:
        return None
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / LOG_FILE
    records_frame(records).to_csv(path, index=False)
    return path


def train(
    task: Task,
    algorithm: Algorithm,
    env: InterferenceGameEnv,
    eval_env: InterferenceGameEnv,
    eval_topologies: Sequence[TopologySnapshot],
    bounds: NormalizationBounds,
    hp: Hyperparameters | None = None,
    seed: int = 0,
    out_dir: str | Path | None = None,
    n_evaluations: int = N_EVALUATIONS,
) -> TrainingResult:
    """
    Train one ensemble and evaluate it ``n_evaluations`` times.

    Args:
        task: Learning task, must match both environments
        algorithm: Algorithm to train
        env: Training environment
        eval_env: Separate environment instance for evaluation
        eval_topologies: Training topology (SL) or the test topologies (ML)
        bounds: Normalization anchors used by every evaluation
        hp: Hyperparameters, defaulting to the task/algorithm table
        seed: Run seed; fixes the environment, learner and evaluation streams
        out_dir: Directory for ``log.csv`` and ``final.ckpt``

    Returns:
        The trained learner and its evaluation records

    Raises:
        ConfigurationError: If the environments do not match ``task``
        TrainingDivergedError: If a loss turns non-finite; the partial log is kept
    """
    if env.task is not task or eval_env.task is not task:
        raise ConfigurationError(f"environments do not run task {task.value}")
    hp = hp or Hyperparameters.defaults(algorithm, task)
    directory = Path(out_dir) if out_dir is not None else None
    schedule = evaluation_schedule(hp.episodes, n_evaluations)

    env.rng = np.random.default_rng([seed, _ENV_STREAM])
    learner = build_ensemble(
        algorithm,
        env.n_agents,
        env.obs_dim,
        env.state_dim,
        env.n_actions,
        hp,
        np.random.default_rng([seed, _LEARNER_STREAM]),
    )
    policy = GreedyEnsemblePolicy(learner)
    records: list[EvaluationRecord] = []
    logger.info(
        f"Training {algorithm.value} on {task.value} (seed={seed}, episodes={hp.episodes})"
    )

    next_point = 0
    try:
        for episode in range(hp.episodes):
            learner.begin_episode(episode)
            obs = env.reset()
            state = env.global_state
            while not env.done:
                actions = learner.act(obs)
                outcome = env.step(actions)
                learner.observe(
                    obs,
                    state,
                    actions,
                    outcome.reward,
                    outcome.observations,
                    outcome.global_state,
                    outcome.done,
                )
                obs, state = outcome.observations, outcome.global_state

            while next_point < len(schedule) and episode + 1 == schedule[next_point]:
                record = evaluate_policy(
                    policy,
                    eval_env,
                    eval_topologies,
                    bounds,
                    seed=seed,
                    eval_index=next_point,
                    episode=episode + 1,
                )
                records.append(record)
                level = logging.INFO if (next_point + 1) % 10 == 0 else logging.DEBUG
                logger.log(
                    level,
                    f"{algorithm.value}/{task.value} seed {seed} eval {next_point}: "
                    f"normalized {record.normalized_return:.3f}",
                )
                next_point += 1
    except TrainingDivergedError as err:
        err.details.setdefault("seed", seed)
        err.details["evaluations"] = len(records)
        _write_log(records, directory)
        logger.error(f"Run {algorithm.value}/{task.value} seed {seed} diverged: {err.message}")
        raise

    log_path = _write_log(records, directory)
    checkpoint_path = None
    if directory is not None:
        checkpoint_path = save_checkpoint(
            directory / CHECKPOINT_FILE,
            learner.networks(),
            {
                "task": task.value,
                "algorithm": algorithm.value,
                "seed": seed,
                "n_agents": env.n_agents,
                "obs_dim": env.obs_dim,
                "state_dim": env.state_dim,
                "n_actions": env.n_actions,
                "hyperparameters": hp.to_dict(),
            },
        )
    logger.info(f"Finished {algorithm.value}/{task.value} seed {seed}")
    return TrainingResult(
        learner=learner,
        records=records,
        episodes=hp.episodes,
        log_path=log_path,
        checkpoint_path=checkpoint_path,
    )


def load_trained(path: str | Path) -> Learner:
    """Rebuild a learner from a ``final.ckpt`` written by :func:`train`."""
    networks, metadata = load_checkpoint(path)
    meta: dict[str, Any] = metadata
    hp = Hyperparameters().with_overrides(meta["hyperparameters"])
    learner = build_ensemble(
        Algorithm(meta["algorithm"]),
        int(meta["n_agents"]),
        int(meta["obs_dim"]),
        int(meta["state_dim"]),
        int(meta["n_actions"]),
        hp,
        int(meta["seed"]),
    )
    learner.load_networks(networks)
    return learner
