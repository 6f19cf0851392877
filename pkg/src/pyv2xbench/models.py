"""
Model definitions for the C-V2X interference game benchmark.

This module contains the value types shared across the package: highway
geometry, topology snapshots, channel parameters and realizations, game moves
and outcomes, normalization bounds, equilibrium statistics and evaluation
records. Flat text records (dataset rows, config values) are parsed into these
types by :class:`RecordModel`, which maps values onto dataclass fields in
declaration order.
"""

from __future__ import annotations

import enum
import math
import types
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from typing import (
    Any,
    Union,
    get_args,
    get_origin,
    get_type_hints,
)

import numpy as np

from .exceptions import ConfigurationError


def db_to_linear(value_db: float | np.ndarray) -> Any:
    """Convert a dB (or dBm) quantity to linear scale (or mW)."""
    return np.power(10.0, np.asarray(value_db, dtype=float) / 10.0)


def _coerce_items(items: Sequence[Any], sequence_type: Any) -> tuple[Any, ...] | list[Any]:
    item_types = [t for t in get_args(sequence_type) if t is not Ellipsis]
    item_type = item_types[0] if item_types else str
    converted = [coerce_value(item, item_type) for item in items]
    return tuple(converted) if get_origin(sequence_type) is tuple else converted


def coerce_value(value: Any, field_type: Any) -> Any:
    """
    Convert a raw text or YAML value to the annotated field type.

    Handles optional unions, enums, bools written as text, integers given for
    float fields and tuples written as YAML lists or comma separated text.

    Raises:
        ValueError: If the value cannot be converted
    """
    union = get_origin(field_type) in (Union, types.UnionType)
    candidates = get_args(field_type) if union else (field_type,)
    if value is None or value == "":
        if type(None) in candidates:
            return None
        raise ValueError("empty value for a required field")
    if isinstance(value, list | tuple):
        for candidate in candidates:
            if get_origin(candidate) in (tuple, list):
                return _coerce_items(value, candidate)
        raise ValueError(f"unexpected list {value!r}")
    if not isinstance(value, str):
        if float in candidates and type(value) is int:
            return float(value)
        return value

    for candidate in candidates:
        if candidate is type(None):
            continue
        origin = get_origin(candidate)
        if origin in (tuple, list):
            items = [item.strip() for item in value.split(",") if item.strip()]
            return _coerce_items(items, candidate)
        if isinstance(candidate, type) and issubclass(candidate, enum.Enum):
            return candidate(value)
        if candidate is bool:
            lowered = value.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if candidate is int:
            return int(value)
        if candidate is float:
            return float(value)
        if candidate is str:
            return value
    return value


class RecordModel:
    """
    Base class for value types parsed from flat text records.

    Leverages PEP 520's stable field ordering to map record columns to
    dataclass fields automatically, eliminating manual index mapping.
    """

    @classmethod
    def from_record(cls, data: list[Any]) -> RecordModel:
        """
        Create a model instance from a record of raw values.

        Args:
            data: Column values in field declaration order

        Returns:
            Instance of the model class with populated fields

        Raises:
            ValueError: If the class is not a dataclass, the record has the
                wrong number of columns, or a value fails conversion
        """
        if not hasattr(cls, "__dataclass_fields__"):
            raise ValueError(f"{cls.__name__} must be a dataclass to use from_record")

        field_list = list(cls.__dataclass_fields__)
        if len(data) != len(field_list):
            raise ValueError(
                f"expected {len(field_list)} columns for {cls.__name__}, got {len(data)}"
            )
        type_hints = get_type_hints(cls)

        kwargs = {}
        for field_name, value in zip(field_list, data, strict=True):
            try:
                kwargs[field_name] = coerce_value(
                    value, type_hints.get(field_name, Any)
                )
            except (ValueError, TypeError) as err:
                raise ValueError(f"column {field_name!r}: {err}") from err
        return cls(**kwargs)

    @classmethod
    def field_names(cls) -> list[str]:
        """Column names in declaration order."""
        return list(getattr(cls, "__dataclass_fields__", {}))


class Task(enum.StrEnum):
    """The five learning tasks of the benchmark."""

    NFIG = "nfig"
    SIG_SL_NFF = "sig_sl_nff"
    SIG_SL_FF = "sig_sl_ff"
    SIG_ML = "sig_ml"
    POSIG = "posig"

    @property
    def is_single_location(self) -> bool:
        """Whether the task trains on one fixed topology."""
        return self in (Task.NFIG, Task.SIG_SL_NFF, Task.SIG_SL_FF)

    @property
    def fast_fading(self) -> bool:
        """Whether small-scale fading is active."""
        return self in (Task.SIG_SL_FF, Task.SIG_ML, Task.POSIG)

    @property
    def partially_observable(self) -> bool:
        """Whether agents receive local observations only."""
        return self is Task.POSIG

    @property
    def default_horizon(self) -> int:
        """Episode length in communication intervals."""
        return 1 if self is Task.NFIG else 50


class Algorithm(enum.StrEnum):
    """The eight benchmarked MARL algorithms."""

    IDQN = "idqn"
    HYS_IDQN = "hys_idqn"
    VDN = "vdn"
    QMIX = "qmix"
    IA2C = "ia2c"
    MAA2C = "maa2c"
    IPPO = "ippo"
    MAPPO = "mappo"

    @property
    def value_based(self) -> bool:
        """Whether the algorithm is an off-policy Q-learning method."""
        return self in (Algorithm.IDQN, Algorithm.HYS_IDQN, Algorithm.VDN, Algorithm.QMIX)

    @property
    def centralized(self) -> bool:
        """Whether training uses a centralized critic or mixer (CTDE)."""
        return self in (Algorithm.VDN, Algorithm.QMIX, Algorithm.MAA2C, Algorithm.MAPPO)

    @property
    def proximal(self) -> bool:
        """Whether the algorithm uses the PPO clipped surrogate."""
        return self in (Algorithm.IPPO, Algorithm.MAPPO)


class DistanceLevel(enum.StrEnum):
    """Vehicle-to-BS distance levels of the test topologies."""

    CLOSE = "close"
    MID = "mid"
    FAR = "far"

    @property
    def mean_distance(self) -> float:
        """Target mean vehicle-to-BS distance in meters."""
        return {"close": 100.0, "mid": 500.0, "far": 1000.0}[self.value]


class VehicleRole(enum.StrEnum):
    """Role of a vehicle in the communication topology."""

    V2V_TX = "v2v_tx"
    V2V_RX = "v2v_rx"
    V2I = "v2i"


class FadingMode(enum.StrEnum):
    """Small-scale fading switch."""

    FF = "ff"
    NFF = "nff"


class SamplingMode(enum.StrEnum):
    """How multi-location episodes draw topologies from a dataset."""

    RANDOM = "random"
    CONSECUTIVE = "consecutive"
    CONSECUTIVE_BATCHES = "consecutive-batches-of-10"


# ETSI density (veh/km) to speed (km/h) pairs
DENSITY_SPEED_PAIRS: dict[float, float] = {35.0: 250.0, 123.0: 70.0, 500.0: 50.0}
DENSITY_LEVELS: tuple[float, ...] = tuple(DENSITY_SPEED_PAIRS)


@dataclass(frozen=True)
class HighwayConfig:
    """
    Geometry, traffic and mobility parameters of the freeway scenario.

    The road spans x in [0, road_length]; lanes 0..lanes_per_direction-1 travel
    towards +x, the remaining lanes towards -x.
    """

    road_length: float = field(
        default=2000.0, metadata={"description": "Length of the highway in meters"}
    )
    lanes_per_direction: int = field(
        default=3, metadata={"description": "Number of lanes in each direction"}
    )
    lane_width: float = field(
        default=4.0, metadata={"description": "Lane width in meters"}
    )
    bs_position: tuple[float, float] | None = field(
        default=None,
        metadata={
            "description": "Base station (x, y) in meters; defaults to 35 m beside the road at x=0"
        },
    )
    density: float = field(
        default=35.0, metadata={"description": "Vehicle density in vehicles per km"}
    )
    speed: float = field(
        default=250.0, metadata={"description": "Nominal vehicle speed in km/h"}
    )
    min_gap: float = field(
        default=2.0,
        metadata={"description": "Minimum same-lane gap between vehicles in meters"},
    )
    speed_noise: float = field(
        default=0.05,
        metadata={"description": "Std of the per-step speed perturbation, fraction of nominal"},
    )
    lane_change_probability: float = field(
        default=0.05,
        metadata={"description": "Probability of a lane change per 100 ms step"},
    )
    allow_custom_density: bool = field(
        default=False,
        metadata={"description": "Accept density/speed pairs outside the ETSI scenarios"},
    )

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        """
        Check the configuration invariants.

        Raises:
            ConfigurationError: If a value is out of range
        """
        if self.road_length <= 0:
            raise ConfigurationError(f"road_length must be > 0, got {self.road_length}")
        if self.min_gap <= 0:
            raise ConfigurationError(f"min_gap must be > 0, got {self.min_gap}")
        if self.lanes_per_direction < 1 or self.lane_width <= 0:
            raise ConfigurationError("lane geometry must be positive")
        if self.density <= 0 or self.speed < 0:
            raise ConfigurationError("density must be > 0 and speed >= 0")
        if not 0.0 <= self.lane_change_probability <= 1.0 or self.speed_noise < 0:
            raise ConfigurationError("mobility noise parameters out of range")
        if not self.allow_custom_density and (
            DENSITY_SPEED_PAIRS.get(float(self.density)) != float(self.speed)
        ):
            raise ConfigurationError(
                f"density/speed pair ({self.density} veh/km, {self.speed} km/h) is not "
                f"one of {sorted(DENSITY_SPEED_PAIRS.items())}; set allow_custom_density"
            )

    @classmethod
    def for_density(cls, density: float, **overrides: Any) -> HighwayConfig:
        """Build a config for one of the ETSI density levels with its paired speed."""
        if float(density) not in DENSITY_SPEED_PAIRS:
            raise ConfigurationError(
                f"unknown density level {density}; expected one of {DENSITY_LEVELS}"
            )
        return cls(density=float(density), speed=DENSITY_SPEED_PAIRS[float(density)], **overrides)

    def with_density(self, density: float) -> HighwayConfig:
        """Copy of this config switched to another ETSI density level."""
        return replace(self, density=float(density), speed=DENSITY_SPEED_PAIRS[float(density)])

    @property
    def n_lanes(self) -> int:
        return 2 * self.lanes_per_direction

    @property
    def base_station(self) -> tuple[float, float]:
        """Resolved base station position."""
        if self.bs_position is not None:
            return (float(self.bs_position[0]), float(self.bs_position[1]))
        return (0.0, -35.0)

    @property
    def speed_ms(self) -> float:
        """Nominal speed in m/s."""
        return self.speed / 3.6

    @property
    def mean_spacing(self) -> float:
        """Mean Poisson spacing between vehicles in meters."""
        return 1000.0 / self.density

    def lane_y(self, lane: int) -> float:
        """Lateral coordinate of a lane center."""
        return self.lane_width * (lane + 0.5)

    def direction(self, lane: int) -> int:
        """Travel direction of a lane: +1 towards +x, -1 towards -x."""
        return 1 if lane < self.lanes_per_direction else -1


@dataclass(frozen=True)
class Vehicle:
    """A vehicle on the highway at one sampling instant."""

    id: int = field(metadata={"description": "Vehicle id, unique within a snapshot"})
    x: float = field(metadata={"description": "Position along the road in meters"})
    y: float = field(metadata={"description": "Lateral position (lane center) in meters"})
    lane: int = field(metadata={"description": "Lane index"})
    speed: float = field(metadata={"description": "Speed in m/s"})
    role: VehicleRole = field(metadata={"description": "Communication role"})
    link_id: int = field(
        metadata={"description": "V2V link index for Tx/Rx, V2I link index for V2I vehicles"}
    )


@dataclass(frozen=True)
class TopologySnapshot:
    """
    Positions of all vehicles at one 100 ms sample.

    Vehicle ids follow a fixed layout: the Tx of V2V link i has id 2i, its Rx
    has id 2i+1, and the V2I vehicle of link m has id 2L+m.
    """

    vehicles: tuple[Vehicle, ...] = field(metadata={"description": "All vehicles"})
    num_v2v_links: int = field(metadata={"description": "Number of V2V links L"})
    num_v2i_links: int = field(metadata={"description": "Number of V2I links M"})
    bs_position: tuple[float, float] = field(metadata={"description": "BS (x, y)"})
    sample_id: int = field(default=0, metadata={"description": "Sample index"})
    density_level: float = field(default=35.0, metadata={"description": "veh/km"})
    distance_level: DistanceLevel | None = field(
        default=None, metadata={"description": "BS distance level of test topologies"}
    )
    rollout_id: int = field(
        default=-1, metadata={"description": "Mobility rollout the sample belongs to"}
    )
    step_in_rollout: int = field(
        default=0, metadata={"description": "100 ms step index within the rollout"}
    )

    def tx(self, link: int) -> Vehicle:
        return self.vehicles[2 * link]

    def rx(self, link: int) -> Vehicle:
        return self.vehicles[2 * link + 1]

    def v2i(self, link: int) -> Vehicle:
        return self.vehicles[2 * self.num_v2v_links + link]

    def _positions(self, vehicles: list[Vehicle]) -> np.ndarray:
        return np.array([[v.x, v.y] for v in vehicles], dtype=float).reshape(-1, 2)

    def tx_positions(self) -> np.ndarray:
        """(L, 2) positions of V2V transmitters."""
        return self._positions([self.tx(i) for i in range(self.num_v2v_links)])

    def rx_positions(self) -> np.ndarray:
        """(L, 2) positions of V2V receivers."""
        return self._positions([self.rx(i) for i in range(self.num_v2v_links)])

    def v2i_positions(self) -> np.ndarray:
        """(M, 2) positions of V2I vehicles."""
        return self._positions([self.v2i(m) for m in range(self.num_v2i_links)])

    def positions(self) -> np.ndarray:
        """(2L+M, 2) positions of all vehicles in id order."""
        return self._positions(list(self.vehicles))

    @property
    def topology_id(self) -> str:
        """Stable identifier such as ``123_close`` or ``sample_42``."""
        if self.distance_level is not None:
            return f"{int(self.density_level)}_{self.distance_level.value}"
        return f"sample_{self.sample_id}"

    def mean_bs_distance(self) -> float:
        """Mean horizontal vehicle-to-BS distance in meters."""
        bs = np.asarray(self.bs_position, dtype=float)
        return float(np.mean(np.linalg.norm(self.positions() - bs, axis=1)))


@dataclass(frozen=True)
class DatasetSpec:
    """Size, sampling mode and seed of a training dataset."""

    n_samples: int = field(metadata={"description": "Number of snapshots"})
    sampling_mode: SamplingMode = field(
        default=SamplingMode.RANDOM,
        metadata={"description": "How episodes draw samples from the dataset"},
    )
    seed: int = field(default=0, metadata={"description": "Generation seed"})
    rollout_length: int = field(
        default=100,
        metadata={"description": "Control intervals per mobility rollout"},
    )

    def __post_init__(self) -> None:
        if self.n_samples <= 0:
            raise ConfigurationError(f"n_samples must be > 0, got {self.n_samples}")
        if self.rollout_length <= 0:
            raise ConfigurationError("rollout_length must be > 0")


@dataclass
class Dataset:
    """An ordered collection of topology snapshots sharing L and M."""

    num_v2v_links: int
    num_v2i_links: int
    snapshots: list[TopologySnapshot] = field(default_factory=list)
    seed: int = 0
    sampling_mode: SamplingMode = SamplingMode.RANDOM

    def __len__(self) -> int:
        return len(self.snapshots)

    def __getitem__(self, index: int) -> TopologySnapshot:
        return self.snapshots[index]


@dataclass
class VehicleRecord(RecordModel):
    """One dataset CSV row: one vehicle of one sample."""

    sample_id: int = field(default=0, metadata={"description": "Sample index"})
    vehicle_id: int = field(default=0, metadata={"description": "Vehicle id"})
    role: VehicleRole = field(
        default=VehicleRole.V2I, metadata={"description": "Communication role"}
    )
    link_id: int = field(default=0, metadata={"description": "Link index"})
    x: float = field(default=0.0, metadata={"description": "Position along road (m)"})
    y: float = field(default=0.0, metadata={"description": "Lateral position (m)"})
    lane: int = field(default=0, metadata={"description": "Lane index"})
    speed: float = field(default=0.0, metadata={"description": "Speed (m/s)"})
    density: float = field(default=35.0, metadata={"description": "veh/km"})
    distance_level: DistanceLevel | None = field(
        default=None, metadata={"description": "Distance level, empty for training data"}
    )
    rollout_id: int = field(default=-1, metadata={"description": "Rollout index"})
    step_in_rollout: int = field(default=0, metadata={"description": "Rollout step"})


@dataclass(frozen=True)
class ChannelParams:
    """Radio parameters of the C-V2X environment."""

    carrier_frequency_ghz: float = field(
        default=2.0, metadata={"description": "Carrier frequency in GHz"}
    )
    subchannel_bandwidth: float = field(
        default=1e6, metadata={"description": "Bandwidth W of one subchannel in Hz"}
    )
    n_subchannels: int = field(
        default=4, metadata={"description": "Number of subchannels / V2I links M"}
    )
    noise_power_dbm: float = field(
        default=-114.0, metadata={"description": "Noise power in dBm"}
    )
    bs_antenna_height: float = field(default=25.0, metadata={"description": "m"})
    bs_gain_dbi: float = field(default=8.0, metadata={"description": "dBi"})
    bs_noise_figure_db: float = field(default=5.0, metadata={"description": "dB"})
    vehicle_antenna_height: float = field(default=1.5, metadata={"description": "m"})
    vehicle_gain_dbi: float = field(default=3.0, metadata={"description": "dBi"})
    vehicle_noise_figure_db: float = field(default=9.0, metadata={"description": "dB"})
    v2i_tx_power_dbm: float = field(
        default=23.0, metadata={"description": "Constant V2I transmit power in dBm"}
    )
    power_levels_dbm: tuple[float, ...] = field(
        default=(23.0, 15.0, 5.0, -100.0),
        metadata={"description": "V2V transmit power levels; -100 dBm means silent"},
    )
    v2v_shadow_std_db: float = field(default=3.0, metadata={"description": "dB"})
    v2v_decorrelation_m: float = field(default=10.0, metadata={"description": "m"})
    v2i_shadow_std_db: float = field(default=8.0, metadata={"description": "dB"})
    v2i_decorrelation_m: float = field(default=50.0, metadata={"description": "m"})
    cam_size_bits: float = field(
        default=6 * 1060 * 8, metadata={"description": "CAM size N_c in bits"}
    )
    communication_interval: float = field(
        default=1e-3, metadata={"description": "Communication interval in seconds"}
    )

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        """
        Check the parameter invariants.

        Raises:
            ConfigurationError: If a value is out of range
        """
        if self.subchannel_bandwidth <= 0:
            raise ConfigurationError("subchannel_bandwidth must be > 0")
        if self.n_subchannels < 1:
            raise ConfigurationError("n_subchannels must be >= 1")
        levels = list(self.power_levels_dbm)
        if levels != sorted(levels, reverse=True):
            raise ConfigurationError(f"power_levels_dbm must be descending, got {levels}")
        if -100.0 not in levels:
            raise ConfigurationError("power_levels_dbm must contain the -100 dBm silent level")

    @property
    def noise_power_mw(self) -> float:
        return float(db_to_linear(self.noise_power_dbm))

    @property
    def v2i_tx_power_mw(self) -> float:
        return float(db_to_linear(self.v2i_tx_power_dbm))

    @property
    def power_levels_mw(self) -> np.ndarray:
        """Linear power per level; the -100 dBm level is exactly zero."""
        levels = np.asarray(self.power_levels_dbm, dtype=float)
        return np.where(levels <= -100.0, 0.0, db_to_linear(levels))

    @property
    def n_power_levels(self) -> int:
        return len(self.power_levels_dbm)

    @property
    def n_actions(self) -> int:
        """Per-agent action count M * |A_P|."""
        return self.n_subchannels * self.n_power_levels

    @property
    def silent_power_level(self) -> int:
        return list(self.power_levels_dbm).index(-100.0)


@dataclass(frozen=True, eq=False)
class LargeScaleGains:
    """
    Frequency-independent large-scale gains (linear) of one topology.

    ``g_v2v_cross[j, i]`` is Tx_j -> Rx_i; its diagonal holds the direct V2V
    gains. ``g_bs_to_v2v[i, m]`` is the V2I vehicle of link m -> Rx_i.
    """

    g_v2v_cross: np.ndarray = field(metadata={"description": "(L, L) Tx_j -> Rx_i"})
    g_v2v_to_bs: np.ndarray = field(metadata={"description": "(L,) Tx_i -> BS"})
    g_bs_to_v2v: np.ndarray = field(metadata={"description": "(L, M) V2I Tx m -> Rx_i"})
    g_v2i: np.ndarray = field(metadata={"description": "(M,) V2I Tx m -> BS"})

    @property
    def g_v2v(self) -> np.ndarray:
        """(L,) direct V2V gains."""
        return np.diagonal(self.g_v2v_cross).copy()


@dataclass(frozen=True, eq=False)
class ChannelRealization:
    """
    Full gain tensors of one communication interval (linear power gains).

    ``v2v[j, i, m]`` is Tx_j -> Rx_i on subchannel m; the diagonal j == i holds
    the direct link gains G_{i,m}.
    """

    v2v: np.ndarray = field(metadata={"description": "(L, L, M) G_{j,i,m}"})
    v2v_to_bs: np.ndarray = field(metadata={"description": "(L, M) G_{i,B,m}"})
    bs_to_v2v: np.ndarray = field(metadata={"description": "(L, M) G_{B,i,m}"})
    v2i: np.ndarray = field(metadata={"description": "(M,) G_m"})
    v2i_active: np.ndarray | None = field(
        default=None,
        metadata={"description": "(M,) subchannels with a V2I user; all when None"},
    )

    @property
    def num_v2v_links(self) -> int:
        return int(self.v2v.shape[0])

    @property
    def num_subchannels(self) -> int:
        return int(self.v2i.shape[0])

    @property
    def active_subchannels(self) -> np.ndarray:
        """(M,) 1.0 where a V2I user transmits, 0.0 on padded subchannels."""
        if self.v2i_active is None:
            return np.ones(self.num_subchannels)
        return np.asarray(self.v2i_active, dtype=float)

    @property
    def direct(self) -> np.ndarray:
        """(L, M) direct V2V gains G_{i,m}."""
        idx = np.arange(self.num_v2v_links)
        return self.v2v[idx, idx, :]


@dataclass(frozen=True)
class Action:
    """One agent's move: a subchannel and a power level index."""

    subchannel: int
    power_level: int

    def index(self, n_power_levels: int) -> int:
        """Flat action index subchannel * |A_P| + power_level."""
        return self.subchannel * n_power_levels + self.power_level

    @classmethod
    def from_index(cls, index: int, n_power_levels: int) -> Action:
        subchannel, power_level = divmod(int(index), n_power_levels)
        return cls(subchannel=subchannel, power_level=power_level)


@dataclass(frozen=True, eq=False)
class QueueState:
    """CAM queue lengths of all V2V links at the start of an interval."""

    q: np.ndarray = field(metadata={"description": "(L,) queued CAMs"})
    t: int = field(default=0, metadata={"description": "Communication interval index"})

    @classmethod
    def initial(cls, n_links: int) -> QueueState:
        return cls(q=np.ones(n_links), t=0)


@dataclass(frozen=True)
class RewardWeights:
    """Weights of the common reward; rates are divided by ``rate_scale``."""

    lambda_v2i: float = field(default=0.1, metadata={"description": "V2I weight"})
    lambda_v2v: float = field(default=0.9, metadata={"description": "V2V weight"})
    completion_bonus: float = field(
        default=0.0, metadata={"description": "Bonus Z per link with an empty queue"}
    )
    rate_scale: float = field(
        default=1e7, metadata={"description": "Rates enter the reward in units of 10 Mb/s"}
    )

    @classmethod
    def nfig(cls) -> RewardWeights:
        return cls(lambda_v2i=0.1, lambda_v2v=0.9, completion_bonus=0.0)

    @classmethod
    def sig(cls) -> RewardWeights:
        return cls(lambda_v2i=0.2, lambda_v2v=1.8, completion_bonus=0.5)


@dataclass(frozen=True, eq=False)
class LinkRates:
    """Instantaneous data rates in bits/s."""

    v2i: np.ndarray = field(metadata={"description": "(M,) r_m"})
    v2v: np.ndarray = field(metadata={"description": "(L,) r_i"})


@dataclass(frozen=True, eq=False)
class StepOutcome:
    """Everything an environment step produces."""

    reward: float
    rewards: np.ndarray
    rates: LinkRates
    v2v_sinr: np.ndarray
    interference: np.ndarray
    global_state: np.ndarray
    observations: np.ndarray
    done: bool
    t: int


@dataclass
class NormalizationBounds:
    """Random-policy and oracle returns anchoring the normalized return."""

    g_min: float = field(metadata={"description": "Uniform-random policy return"})
    g_max: float = field(metadata={"description": "Oracle return"})
    task: Task = field(default=Task.NFIG)
    topology_id: str = field(default="")
    g_min_stderr: float = field(default=0.0)
    n_random_episodes: int = field(default=0)

    @property
    def degenerate(self) -> bool:
        """True when the bounds cannot define an affine normalization."""
        return not self.g_max > self.g_min

    def to_dict(self) -> dict[str, Any]:
        return {
            "g_min": self.g_min,
            "g_max": self.g_max,
            "task": self.task.value,
            "topology_id": self.topology_id,
            "g_min_stderr": self.g_min_stderr,
            "n_random_episodes": self.n_random_episodes,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> NormalizationBounds:
        return cls(
            g_min=float(data["g_min"]),
            g_max=float(data["g_max"]),
            task=Task(data.get("task", Task.NFIG.value)),
            topology_id=str(data.get("topology_id", "")),
            g_min_stderr=float(data.get("g_min_stderr", 0.0)),
            n_random_episodes=int(data.get("n_random_episodes", 0)),
        )


@dataclass(frozen=True)
class ReturnEstimate:
    """Mean episode return with its standard error."""

    mean: float
    stderr: float
    n_episodes: int


@dataclass
class EquilibriumSet:
    """Pure-strategy Nash equilibria of a common-payoff game."""

    joint_actions: list[tuple[int, ...]] = field(default_factory=list)
    returns: list[float] = field(
        default_factory=list, metadata={"description": "Normalized equilibrium returns"}
    )
    raw_returns: list[float] = field(default_factory=list)
    topology_id: str = ""

    @property
    def empty(self) -> bool:
        return not self.joint_actions

    @property
    def g_ne_max(self) -> float:
        return max(self.returns)

    @property
    def g_ne_min(self) -> float:
        return min(self.returns)

    @property
    def g_ne_mean(self) -> float:
        return float(np.mean(self.returns))


@dataclass(frozen=True)
class CdsReport:
    """Coordination difficulty score of one topology."""

    topology_id: str
    score: float
    equilibrium_count: int
    g_ne_max: float
    g_ne_min: float
    g_ne_mean: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "topology_id": self.topology_id,
            "cds": self.score,
            "equilibrium_count": self.equilibrium_count,
            "g_ne_max": self.g_ne_max,
            "g_ne_min": self.g_ne_min,
            "g_ne_mean": self.g_ne_mean,
        }


@dataclass
class EvaluationRecord:
    """One evaluation point of a training run."""

    seed: int
    eval_index: int
    episode: int
    topology_ids: list[str] = field(default_factory=list)
    returns: list[float] = field(
        default_factory=list, metadata={"description": "Raw return per episode"}
    )
    normalized_returns: list[float] = field(default_factory=list)

    @property
    def mean_return(self) -> float:
        return float(np.mean(self.returns)) if self.returns else math.nan

    @property
    def normalized_return(self) -> float:
        return float(np.mean(self.normalized_returns)) if self.normalized_returns else math.nan


@dataclass
class ResultCell:
    """Aggregated result of one (task, algorithm) pair."""

    task: str
    algorithm: str
    max_normalized_return: float
    ci_half_width: float
    best_eval_index: int
    seeds: list[int] = field(default_factory=list)
    curves: np.ndarray = field(
        default_factory=lambda: np.zeros((0, 0)),
        metadata={"description": "(n_seeds, n_evals) normalized returns"},
    )

    @property
    def formatted(self) -> str:
        """Two-decimal ``mean ± ci`` rendering."""
        return f"{self.max_normalized_return:.2f} ± {self.ci_half_width:.2f}"


@dataclass
class ResultTable:
    """Result matrix over (task, algorithm) cells."""

    cells: list[ResultCell] = field(default_factory=list)
    schema_version: int = 1

    def cell(self, task: str, algorithm: str) -> ResultCell:
        for cell in self.cells:
            if cell.task == task and cell.algorithm == algorithm:
                return cell
        raise KeyError((task, algorithm))
