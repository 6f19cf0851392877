"""
Experiment orchestration: datasets, bounds, per-seed runs and manifests.
"""

from __future__ import annotations

import asyncio
import hashlib
import json
import logging
from concurrent.futures import Executor, ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Any, get_type_hints

import numpy as np

from .algorithms import GreedyEnsemblePolicy, Hyperparameters
from .evaluation import CHECKPOINT_FILE, MANIFEST_FILE, evaluate_policy
from .exceptions import ConfigurationError, V2XBenchError
from .games import GameConfig, InterferenceGameEnv, TopologySource
from .models import (
    Algorithm,
    CdsReport,
    ChannelParams,
    Dataset,
    DatasetSpec,
    EvaluationRecord,
    HighwayConfig,
    NormalizationBounds,
    SamplingMode,
    Task,
    TopologySnapshot,
    coerce_value,
)
from .oracles import (
    BoundsCache,
    bounds_key,
    coordination_difficulty_score,
    enumerate_pure_nash,
    multi_location_bounds,
    nfig_payoff_tensor,
    robustness_ablation,
    single_location_bounds,
)
from .topology import (
    generate_dataset,
    load_dataset,
    sample_training_topologies,
    save_dataset,
    test_topologies,
)
from .training import load_trained, train

logger = logging.getLogger(__name__)

DEFAULT_SEEDS = (0, 1, 2, 3, 4)
ABLATION_SAMPLES = 9
_ABLATION_STREAM = 4
_NESTED = {"highway": HighwayConfig, "channel": ChannelParams, "game": GameConfig}


def package_version() -> str:
    try:
        return version("pyv2xbench")
    except PackageNotFoundError:
        return "unknown"


def _restore(cls: type, data: dict[str, Any]) -> Any:
    """Rebuild a flat dataclass from its ``asdict`` form (lists back to tuples)."""
    hints = get_type_hints(cls)
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        kwargs[f.name] = tuple(value) if isinstance(value, list) else coerce_value(
            value, hints[f.name]
        )
    return cls(**kwargs)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce the runs of one (task, algorithm) cell."""

    task: Task = field(default=Task.NFIG, metadata={"description": "Learning task"})
    algorithm: Algorithm = field(default=Algorithm.IDQN, metadata={"description": "Algorithm"})
    num_v2v_links: int = field(default=4, metadata={"description": "V2V links L (agents)"})
    num_v2i_links: int = field(default=4, metadata={"description": "V2I links M (subchannels)"})
    seeds: tuple[int, ...] = field(default=DEFAULT_SEEDS, metadata={"description": "Run seeds"})
    topology: str = field(
        default="123_close",
        metadata={"description": "Test topology id trained on by single-location tasks"},
    )
    dataset_path: str | None = field(
        default=None, metadata={"description": "Training dataset; generated when missing"}
    )
    n_train_samples: int | None = field(
        default=None,
        metadata={"description": "Dataset size; 15000 for L <= 4, else 60000"},
    )
    sampling_mode: SamplingMode = field(
        default=SamplingMode.RANDOM, metadata={"description": "Episode sampling of the dataset"}
    )
    dataset_seed: int = field(default=0, metadata={"description": "Training dataset seed"})
    test_seed: int = field(default=0, metadata={"description": "Test topology seed"})
    scale: float = field(default=0.02, metadata={"description": "Episode budget multiplier"})
    out_dir: str = field(default="out", metadata={"description": "Root of run directories"})
    workers: int = field(default=1, metadata={"description": "Parallel seed processes"})
    n_random_episodes: int = field(
        default=200, metadata={"description": "Random-policy episodes for g_min"}
    )
    n_evaluations: int = field(default=100, metadata={"description": "Evaluation points"})
    bounds_path: str | None = field(
        default=None, metadata={"description": "Bounds cache; <out_dir>/bounds.json when unset"}
    )
    hyperparameters: dict[str, Any] = field(
        default_factory=dict, metadata={"description": "Hyperparameter overrides"}
    )
    highway: HighwayConfig = field(default_factory=HighwayConfig)
    channel: ChannelParams = field(default_factory=ChannelParams)
    game: GameConfig = field(default_factory=GameConfig)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        """
        Check ranges and that the hyperparameter overrides resolve.

        Raises:
            ConfigurationError: If a value is invalid
        """
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        if self.num_v2v_links < 1 or self.num_v2i_links < 1:
            raise ConfigurationError("L and M must be >= 1")
        if self.scale <= 0:
            raise ConfigurationError(f"scale must be > 0, got {self.scale}")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")
        if self.n_evaluations < 1 or self.n_random_episodes < 1:
            raise ConfigurationError("n_evaluations and n_random_episodes must be >= 1")
        if self.n_train_samples is not None and self.n_train_samples < 1:
            raise ConfigurationError("n_train_samples must be >= 1")
        self.resolved_hyperparameters()

    @property
    def label(self) -> str:
        """Task label; single-location tasks carry their topology id."""
        if self.task.is_single_location:
            return f"{self.task.value}_{self.topology}"
        return self.task.value

    def run_dir(self, seed: int) -> Path:
        return Path(self.out_dir) / self.label / self.algorithm.value / str(seed)

    def resolved_hyperparameters(self) -> Hyperparameters:
        return (
            Hyperparameters.defaults(self.algorithm, self.task)
            .with_overrides(self.hyperparameters)
            .scaled(self.scale)
        )

    def channel_params(self) -> ChannelParams:
        """Channel parameters with one subchannel per V2I link."""
        return replace(self.channel, n_subchannels=self.num_v2i_links)

    @property
    def train_samples(self) -> int:
        if self.n_train_samples is not None:
            return self.n_train_samples
        return 15000 if self.num_v2v_links <= 4 else 60000

    def resolved_dataset_path(self) -> Path:
        if self.dataset_path:
            return Path(self.dataset_path)
        name = (
            f"train_L{self.num_v2v_links}_M{self.num_v2i_links}"
            f"_n{self.train_samples}_s{self.dataset_seed}.csv"
        )
        return Path(self.out_dir) / "datasets" / name

    def resolved_bounds_path(self) -> Path:
        return Path(self.bounds_path) if self.bounds_path else Path(self.out_dir) / "bounds.json"

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["task"] = self.task.value
        data["algorithm"] = self.algorithm.value
        data["sampling_mode"] = self.sampling_mode.value
        data["seeds"] = list(self.seeds)
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ExperimentConfig:
        """
        Inverse of :meth:`to_dict`.

        Raises:
            ConfigurationError: For unknown keys or invalid values
        """
        valid = [f.name for f in fields(cls)]
        unknown = sorted(set(data) - set(valid))
        if unknown:
            raise ConfigurationError(f"unknown experiment keys {unknown}", valid)
        hints = get_type_hints(cls)
        kwargs: dict[str, Any] = {}
        try:
            for key, value in data.items():
                if key in _NESTED:
                    kwargs[key] = _restore(_NESTED[key], value)
                elif key == "seeds":
                    kwargs[key] = tuple(int(s) for s in value)
                elif key == "hyperparameters":
                    kwargs[key] = dict(value)
                else:
                    kwargs[key] = coerce_value(value, hints[key])
        except (ValueError, TypeError) as err:
            raise ConfigurationError(f"invalid experiment config: {err}") from err
        return cls(**kwargs)


@dataclass
class RunOutcome:
    """Result of one seed."""

    seed: int
    run_dir: Path
    status: str
    records: list[EvaluationRecord] = field(default_factory=list)
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass
class ExperimentResult:
    """All seeds of one experiment."""

    config: ExperimentConfig
    outcomes: list[RunOutcome] = field(default_factory=list)

    @property
    def run_dirs(self) -> list[Path]:
        return [o.run_dir for o in self.outcomes]

    @property
    def failures(self) -> list[RunOutcome]:
        return [o for o in self.outcomes if not o.ok]

    @property
    def records(self) -> list[EvaluationRecord]:
        return [r for o in self.outcomes for r in o.records]


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def prepare_dataset(config: ExperimentConfig) -> tuple[Dataset | None, str | None]:
    """
    Load the training dataset of a multi-location task, generating it when missing.

    Returns:
        Tuple of the dataset and its file SHA-256; ``(None, None)`` for
        single-location tasks

    Raises:
        ConfigurationError: If the file holds a different (L, M)
    """
    if config.task.is_single_location:
        return None, None
    path = config.resolved_dataset_path()
    if path.exists():
        dataset = load_dataset(path)
        if (dataset.num_v2v_links, dataset.num_v2i_links) != (
            config.num_v2v_links,
            config.num_v2i_links,
        ):
            raise ConfigurationError(
                f"dataset {path} has L={dataset.num_v2v_links}, M={dataset.num_v2i_links}; "
                f"expected L={config.num_v2v_links}, M={config.num_v2i_links}"
            )
        logger.info(f"Loaded training dataset {path} ({len(dataset)} samples)")
    else:
        logger.info(f"Dataset {path} missing, generating {config.train_samples} samples")
        spec = DatasetSpec(config.train_samples, config.sampling_mode, config.dataset_seed)
        dataset = generate_dataset(
            config.highway, config.num_v2v_links, config.num_v2i_links, spec
        )
        save_dataset(dataset, path)
    return dataset, file_sha256(path)


def evaluation_set(config: ExperimentConfig) -> list[TopologySnapshot]:
    """The nine test topologies of the experiment's (L, M)."""
    return test_topologies(
        config.highway, config.num_v2v_links, config.num_v2i_links, config.test_seed
    )


def select_topology(topologies: list[TopologySnapshot], topology_id: str) -> TopologySnapshot:
    """
    Look up a test topology by id such as ``123_close``.

    Raises:
        ConfigurationError: If no topology has that id
    """
    for topology in topologies:
        if topology.topology_id == topology_id:
            return topology
    valid = [t.topology_id for t in topologies]
    raise ConfigurationError(f"unknown topology {topology_id!r}", valid)


def build_env(
    config: ExperimentConfig,
    task: Task,
    source: TopologySource,
    seed: int | None = None,
) -> InterferenceGameEnv:
    return InterferenceGameEnv(task, source, config.channel_params(), config.game, seed)


def task_environments(
    config: ExperimentConfig, dataset: Dataset | None, test_set: list[TopologySnapshot]
) -> tuple[InterferenceGameEnv, InterferenceGameEnv, list[TopologySnapshot]]:
    """
    Training env, evaluation env and evaluation topologies of the task.

    Single-location tasks train and evaluate on the configured topology;
    multi-location tasks draw training episodes from the dataset and evaluate
    on the nine test topologies.
    """
    if config.task.is_single_location:
        topology = select_topology(test_set, config.topology)
        source = TopologySource.single(topology)
        return (
            build_env(config, config.task, source),
            build_env(config, config.task, TopologySource.single(topology)),
            [topology],
        )
    if dataset is None:
        raise ConfigurationError(f"task {config.task.value} needs a training dataset")
    source = TopologySource.from_dataset(dataset, config.sampling_mode)
    return (
        build_env(config, config.task, source),
        build_env(config, config.task, TopologySource(test_set, fixed=False)),
        test_set,
    )


def bounds_inputs(
    config: ExperimentConfig, topologies: list[TopologySnapshot]
) -> dict[str, Any]:
    """Settings and vehicle positions that determine normalization bounds."""
    return {
        "test_seed": config.test_seed,
        "n_random_episodes": config.n_random_episodes,
        "highway": asdict(config.highway),
        "channel": asdict(config.channel_params()),
        "game": asdict(config.game),
        "positions": [t.positions().tolist() for t in topologies],
        "bs_positions": [list(t.bs_position) for t in topologies],
    }


def experiment_bounds(
    config: ExperimentConfig,
    test_set: list[TopologySnapshot],
    cache: BoundsCache | None = None,
) -> NormalizationBounds:
    """
    Normalization bounds of the task, computed once and cached on disk.

    Single-location tasks are normalized per topology; SIG ML and POSIG use
    task-level bounds over the test set.
    """
    cache = cache or BoundsCache(config.resolved_bounds_path())
    L, M = config.num_v2v_links, config.num_v2i_links
    if config.task.is_single_location:
        topology = select_topology(test_set, config.topology)
        env = build_env(config, config.task, TopologySource.single(topology))
        return cache.get_or_compute(
            bounds_key(
                config.task, topology.topology_id, L, M, bounds_inputs(config, [topology])
            ),
            lambda: single_location_bounds(
                env, topology, config.n_random_episodes, seed=config.test_seed
            ),
        )
    env = build_env(config, config.task, TopologySource(test_set))
    sl_env = build_env(config, Task.SIG_SL_NFF, TopologySource(test_set))
    return cache.get_or_compute(
        bounds_key(config.task, "test_set", L, M, bounds_inputs(config, test_set)),
        lambda: multi_location_bounds(
            env, sl_env, test_set, config.n_random_episodes, seed=config.test_seed
        ),
    )


def write_manifest(run_dir: Path, manifest: dict[str, Any]) -> Path:
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / MANIFEST_FILE
    path.write_text(json.dumps(manifest, indent=2, default=str))
    return path


def run_seed(
    config: ExperimentConfig,
    seed: int,
    bounds: NormalizationBounds,
    dataset: Dataset | None = None,
    dataset_sha256: str | None = None,
) -> RunOutcome:
    """
    Train and evaluate one seed, recording the outcome in ``manifest.json``.

    The manifest is written on failure too; the error is then re-raised.
    """
    run_dir = config.run_dir(seed)
    hp = config.resolved_hyperparameters()
    manifest: dict[str, Any] = {
        "version": package_version(),
        "task_label": config.label,
        "algorithm": config.algorithm.value,
        "seed": seed,
        "config": config.to_dict(),
        "hyperparameters": hp.to_dict(),
        "dataset_path": (
            None if config.task.is_single_location else str(config.resolved_dataset_path())
        ),
        "dataset_sha256": dataset_sha256,
        "bounds": bounds.to_dict(),
        "status": "running",
        "error": None,
    }
    write_manifest(run_dir, manifest)
    try:
        test_set = evaluation_set(config)
        env, eval_env, eval_topologies = task_environments(config, dataset, test_set)
        result = train(
            config.task,
            config.algorithm,
            env,
            eval_env,
            eval_topologies,
            bounds,
            hp,
            seed,
            run_dir,
            config.n_evaluations,
        )
        if dataset is not None and len(dataset):
            ablation = robustness_ablation(
                GreedyEnsemblePolicy(result.learner),
                eval_env,
                sample_training_topologies(
                    dataset, ABLATION_SAMPLES, np.random.default_rng([seed, _ABLATION_STREAM])
                ),
                test_set,
                bounds,
                seed,
            )
            manifest["ablation"] = {
                "train_normalized": ablation.train_normalized,
                "test_normalized": ablation.test_normalized,
                "gap": ablation.gap,
            }
    except Exception as err:
        message = err.message if isinstance(err, V2XBenchError) else str(err)
        manifest["status"] = "failed"
        manifest["error"] = f"{type(err).__name__}: {message}"
        if isinstance(err, V2XBenchError):
            manifest["details"] = err.details
        write_manifest(run_dir, manifest)
        raise
    manifest["status"] = "ok"
    manifest["n_records"] = len(result.records)
    write_manifest(run_dir, manifest)
    return RunOutcome(seed=seed, run_dir=run_dir, status="ok", records=result.records)


def _executor(workers: int) -> Executor:
    if workers > 1:
        return ProcessPoolExecutor(max_workers=workers)
    return ThreadPoolExecutor(max_workers=1)


async def run_experiment_async(config: ExperimentConfig) -> ExperimentResult:
    """
    Run every seed of an experiment; a failing seed never aborts its siblings.

    Bounds and the dataset are prepared once before any seed starts.
    """
    dataset, sha = prepare_dataset(config)
    test_set = evaluation_set(config)
    bounds = experiment_bounds(config, test_set)
    logger.info(
        f"Running {config.algorithm.value} on {config.label}: seeds {list(config.seeds)}"
    )
    loop = asyncio.get_running_loop()
    with _executor(config.workers) as executor:
        futures = [
            loop.run_in_executor(executor, run_seed, config, seed, bounds, dataset, sha)
            for seed in config.seeds
        ]
        results = await asyncio.gather(*futures, return_exceptions=True)

    outcomes = []
    for seed, result in zip(config.seeds, results, strict=True):
        if isinstance(result, BaseException):
            logger.warning(f"Seed {seed} of {config.label}/{config.algorithm.value} failed: {result}")
            outcomes.append(
                RunOutcome(
                    seed=seed,
                    run_dir=config.run_dir(seed),
                    status="failed",
                    error=f"{type(result).__name__}: {result}",
                )
            )
        else:
            outcomes.append(result)
    return ExperimentResult(config=config, outcomes=outcomes)


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Synchronous wrapper of :func:`run_experiment_async`."""
    return asyncio.run(run_experiment_async(config))


def load_run_config(run_dir: str | Path) -> tuple[ExperimentConfig, dict[str, Any]]:
    """Experiment config and raw manifest of a run directory."""
    path = Path(run_dir) / MANIFEST_FILE
    if not path.exists():
        raise ConfigurationError(f"{run_dir} has no {MANIFEST_FILE}")
    manifest = json.loads(path.read_text())
    return ExperimentConfig.from_dict(manifest["config"]), manifest


def evaluate_run(run_dir: str | Path, eval_index: int = 0) -> EvaluationRecord:
    """Reload a finished run from its manifest and checkpoint and evaluate it again."""
    config, manifest = load_run_config(run_dir)
    learner = load_trained(Path(run_dir) / CHECKPOINT_FILE)
    test_set = evaluation_set(config)
    bounds = NormalizationBounds.from_dict(manifest["bounds"])
    if config.task.is_single_location:
        topology = select_topology(test_set, config.topology)
        env = build_env(config, config.task, TopologySource.single(topology))
        topologies = [topology]
    else:
        env = build_env(config, config.task, TopologySource(test_set))
        topologies = test_set
    return evaluate_policy(
        GreedyEnsemblePolicy(learner),
        env,
        topologies,
        bounds,
        seed=int(manifest["seed"]),
        eval_index=eval_index,
    )


def topology_set(config: ExperimentConfig, which: str) -> list[TopologySnapshot]:
    """
    The nine test topologies, or nine random samples of the training dataset.

    Raises:
        ConfigurationError: For an unknown set name
    """
    if which == "test":
        return evaluation_set(config)
    if which == "train":
        dataset, _ = prepare_dataset(replace(config, task=Task.SIG_ML))
        assert dataset is not None
        return sample_training_topologies(
            dataset, ABLATION_SAMPLES, np.random.default_rng([config.dataset_seed, _ABLATION_STREAM])
        )
    raise ConfigurationError(f"unknown topology set {which!r}", ["test", "train"])


def topology_bounds(
    config: ExperimentConfig,
    task: Task,
    topology: TopologySnapshot,
    cache: BoundsCache | None = None,
) -> NormalizationBounds:
    """Cached single-location bounds of ``task`` on one topology."""
    cache = cache or BoundsCache(config.resolved_bounds_path())
    env = build_env(config, task, TopologySource.single(topology))
    return cache.get_or_compute(
        bounds_key(
            task,
            topology.topology_id,
            config.num_v2v_links,
            config.num_v2i_links,
            bounds_inputs(config, [topology]),
        ),
        lambda: single_location_bounds(
            env, topology, config.n_random_episodes, seed=config.test_seed
        ),
    )


def cds_report(
    config: ExperimentConfig,
    topology: TopologySnapshot,
    cache: BoundsCache | None = None,
) -> CdsReport:
    """Coordination difficulty of the NFIG played on ``topology``."""
    bounds = topology_bounds(config, Task.NFIG, topology, cache)
    env = build_env(config, Task.NFIG, TopologySource.single(topology))
    env.reset(topology=topology)
    assert env.realization is not None
    payoff = nfig_payoff_tensor(env.realization, env.params, env.weights)
    equilibria = enumerate_pure_nash(payoff, bounds, topology.topology_id)
    return coordination_difficulty_score(equilibria)
