"""Multi-agent reinforcement learning benchmark for C-V2X interference games."""

from .algorithms import GreedyEnsemblePolicy, Hyperparameters, Learner, build_ensemble
from .exceptions import (
    AggregationError,
    ConfigurationError,
    DatasetFormatError,
    DegenerateBoundsError,
    EnumerationLimitError,
    EnvironmentStateError,
    ShapeMismatchError,
    TopologyInfeasibleError,
    TrainingDivergedError,
    V2XBenchError,
)
from .games import GameConfig, InterferenceGameEnv, TopologySource, run_episode
from .harness import ExperimentConfig, run_experiment, run_experiment_async
from .models import (
    Algorithm,
    ChannelParams,
    Dataset,
    DatasetSpec,
    EvaluationRecord,
    HighwayConfig,
    NormalizationBounds,
    ResultTable,
    Task,
    TopologySnapshot,
)

__version__ = "0.1.0b1"

__all__ = [
    "AggregationError",
    "Algorithm",
    "ChannelParams",
    "ConfigurationError",
    "Dataset",
    "DatasetFormatError",
    "DatasetSpec",
    "DegenerateBoundsError",
    "EnumerationLimitError",
    "EnvironmentStateError",
    "EvaluationRecord",
    "ExperimentConfig",
    "GameConfig",
    "GreedyEnsemblePolicy",
    "HighwayConfig",
    "Hyperparameters",
    "InterferenceGameEnv",
    "Learner",
    "NormalizationBounds",
    "ResultTable",
    "ShapeMismatchError",
    "Task",
    "TopologyInfeasibleError",
    "TopologySnapshot",
    "TopologySource",
    "TrainingDivergedError",
    "V2XBenchError",
    "build_ensemble",
    "run_episode",
    "run_experiment",
    "run_experiment_async",
]
