"""
Highway topology generation, mobility and dataset persistence.

Vehicles are scattered over a window of the freeway by a count-conditioned
spatial Poisson process, then moved with a simple speed-noise / lane-change
model. Datasets are written as CSV with a JSON metadata line.
"""

from __future__ import annotations

import io
import json
import logging
import re
from dataclasses import replace
from pathlib import Path
from typing import Any, cast

import numpy as np
import pandas as pd
from scipy.optimize import brentq

from .exceptions import DatasetFormatError, TopologyInfeasibleError
from .models import (
    DENSITY_LEVELS,
    Dataset,
    DatasetSpec,
    DistanceLevel,
    HighwayConfig,
    SamplingMode,
    TopologySnapshot,
    Vehicle,
    VehicleRecord,
    VehicleRole,
)

logger = logging.getLogger(__name__)

CONTROL_INTERVAL = 0.1
DATASET_FORMAT = "pyv2xbench-dataset"
DATASET_VERSION = 1
_PLACEMENT_RETRIES = 1000
_TRAIN_STREAM = 1
_TEST_STREAM = 2
_GAP_SLACK = 1e-6


def _as_generator(rng: np.random.Generator | int | None) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def scatter_distance(config: HighwayConfig, n_vehicles: int) -> float:
    """Scatter window D = n * (1000 / density) meters, clamped to the road length."""
    return float(min(n_vehicles * config.mean_spacing, config.road_length))


def _lane_is_free(
    xs: np.ndarray, lanes: np.ndarray, x: float, lane: int, min_gap: float
) -> bool:
    same_lane = xs[lanes == lane]
    return bool(np.all(np.abs(same_lane - x) >= min_gap))


def _mean_bs_distance(
    xs: np.ndarray, ys: np.ndarray, shifts: np.ndarray, bs: tuple[float, float]
) -> np.ndarray:
    dx = xs[None, :] + shifts[:, None] - bs[0]
    dy = ys[None, :] - bs[1]
    return np.sqrt(dx**2 + dy**2).mean(axis=1)


def _shift_for_distance(
    xs: np.ndarray,
    ys: np.ndarray,
    bs: tuple[float, float],
    max_shift: float,
    target: float,
) -> float:
    """Shift along x whose mean vehicle-to-BS distance is closest to ``target``."""
    if max_shift <= 0:
        current = float(_mean_bs_distance(xs, ys, np.zeros(1), bs)[0])
        logger.debug(
            f"Distance target {target} m unreachable, cluster fills the road at {current:.1f} m"
        )
        return 0.0
    grid = np.linspace(0.0, max_shift, 257)
    values = _mean_bs_distance(xs, ys, grid, bs) - target
    crossings = np.flatnonzero(np.sign(values[:-1]) * np.sign(values[1:]) <= 0)
    if crossings.size == 0:
        best = int(np.argmin(np.abs(values)))
        logger.debug(
            f"Distance target {target} m unreachable, clamped to "
            f"{values[best] + target:.1f} m"
        )
        return float(grid[best])

    lo, hi = grid[crossings[0]], grid[crossings[0] + 1]
    if values[crossings[0]] == 0:
        return float(lo)

    def residual(s: float) -> float:
        return float(_mean_bs_distance(xs, ys, np.array([s]), bs)[0] - target)

    return float(brentq(residual, lo, hi, xtol=1e-9))


def generate_initial_topology(
    config: HighwayConfig,
    num_v2v_links: int,
    num_v2i_links: int,
    distance_level: DistanceLevel | None = None,
    rng: np.random.Generator | int | None = 0,
    sample_id: int = 0,
) -> TopologySnapshot:
    """
    Sample a fresh vehicle topology.

    V2V transmitters and receivers are drawn as a sorted, gap-constrained
    uniform sample over the scatter window; consecutive vehicles form a link
    and share a lane with the Rx downstream. V2I vehicles are placed by
    rejection sampling. The cluster is then shifted along the road so its
    mean BS distance matches ``distance_level`` (random shift when None).

    Args:
        config: Highway geometry and traffic parameters
        num_v2v_links: Number of V2V links L
        num_v2i_links: Number of V2I links M
        distance_level: Target BS distance level, or None for a random position
        rng: Generator or seed
        sample_id: Id recorded on the snapshot

    Returns:
        The generated snapshot

    Raises:
        TopologyInfeasibleError: If the gap constraint cannot be met in the window
    """
    if num_v2v_links < 1 or num_v2i_links < 0:
        raise TopologyInfeasibleError(
            f"need L >= 1 and M >= 0, got L={num_v2v_links}, M={num_v2i_links}"
        )
    gen = _as_generator(rng)
    n_v2v = 2 * num_v2v_links
    n_total = n_v2v + num_v2i_links
    window = scatter_distance(config, n_total)
    gap = config.min_gap

    free_length = window - (n_v2v - 1) * gap
    if free_length < 0 or n_total * gap > window * config.n_lanes + gap:
        raise TopologyInfeasibleError(
            f"cannot place {n_total} vehicles with min_gap {gap} m "
            f"within {window:.1f} m at density {config.density} veh/km",
        )

    v2v_x = np.sort(gen.uniform(0.0, free_length, n_v2v)) + np.arange(n_v2v) * gap
    xs = np.empty(n_total)
    lanes = np.empty(n_total, dtype=int)
    roles: list[VehicleRole] = []
    link_ids: list[int] = []
    for link in range(num_v2v_links):
        lane = int(gen.integers(config.n_lanes))
        back, front = v2v_x[2 * link], v2v_x[2 * link + 1]
        tx_x, rx_x = (back, front) if config.direction(lane) > 0 else (front, back)
        xs[2 * link], xs[2 * link + 1] = tx_x, rx_x
        lanes[2 * link] = lanes[2 * link + 1] = lane
        roles += [VehicleRole.V2V_TX, VehicleRole.V2V_RX]
        link_ids += [link, link]

    for m in range(num_v2i_links):
        idx = n_v2v + m
        for attempt in range(_PLACEMENT_RETRIES):
            x = float(gen.uniform(0.0, window))
            lane = int(gen.integers(config.n_lanes))
            if _lane_is_free(xs[:idx], lanes[:idx], x, lane, gap):
                xs[idx], lanes[idx] = x, lane
                break
        else:
            raise TopologyInfeasibleError(
                f"could not place V2I vehicle {m} after {_PLACEMENT_RETRIES} attempts",
            )
        if attempt:
            logger.debug(f"V2I vehicle {m} placed after {attempt} rejected draws")
        roles.append(VehicleRole.V2I)
        link_ids.append(m)

    ys = np.array([config.lane_y(int(lane)) for lane in lanes])
    xs -= xs.min()
    max_shift = config.road_length - float(xs.max())
    bs = config.base_station
    if distance_level is None:
        shift = float(gen.uniform(0.0, max(max_shift, 0.0)))
    else:
        shift = _shift_for_distance(xs, ys, bs, max_shift, distance_level.mean_distance)
    xs += shift

    speed = config.speed_ms
    vehicles = tuple(
        Vehicle(
            id=k,
            x=float(xs[k]),
            y=float(ys[k]),
            lane=int(lanes[k]),
            speed=speed,
            role=roles[k],
            link_id=link_ids[k],
        )
        for k in range(n_total)
    )
    return TopologySnapshot(
        vehicles=vehicles,
        num_v2v_links=num_v2v_links,
        num_v2i_links=num_v2i_links,
        bs_position=bs,
        sample_id=sample_id,
        density_level=float(config.density),
        distance_level=distance_level,
    )


def _mobility_units(snapshot: TopologySnapshot) -> list[list[int]]:
    """Vehicles that move together: each V2V pair, then each V2I vehicle."""
    units = [[2 * i, 2 * i + 1] for i in range(snapshot.num_v2v_links)]
    units += [[2 * snapshot.num_v2v_links + m] for m in range(snapshot.num_v2i_links)]
    return units


def _gap_conflicts(
    xs: np.ndarray, lanes: np.ndarray, unit_of: np.ndarray, min_gap: float
) -> list[tuple[int, int]]:
    """Unit pairs with two same-lane neighbours closer than ``min_gap``."""
    conflicts = []
    for lane in np.unique(lanes):
        idx = np.flatnonzero(lanes == lane)
        idx = idx[np.argsort(xs[idx], kind="stable")]
        for a, b in zip(idx[:-1], idx[1:], strict=True):
            if unit_of[a] != unit_of[b] and xs[b] - xs[a] < min_gap:
                conflicts.append((int(unit_of[a]), int(unit_of[b])))
    return conflicts


def step_mobility(
    snapshot: TopologySnapshot,
    config: HighwayConfig,
    dt: float = CONTROL_INTERVAL,
    rng: np.random.Generator | int | None = None,
) -> TopologySnapshot:
    """
    Advance every vehicle by one mobility step.

    Each V2V pair moves as a unit with a shared speed and lane. Speeds take a
    Gaussian perturbation clamped to [0.8, 1.2] x nominal; lane changes go to
    an adjacent lane of the same direction and are aborted when they would
    violate the minimum gap. Units leaving the road re-enter at the other end.

    Moves that still leave two units closer than ``min_gap`` in a lane are
    resolved by car-following: the follower is capped at its leader's rear
    minus the gap and takes the leader's speed. A unit that cannot be capped
    without moving backwards, or that conflicts after re-entering the road,
    keeps its previous position, lane and speed for this step.
    """
    if dt == 0:
        return snapshot
    gen = _as_generator(rng)
    old_xs = np.array([v.x for v in snapshot.vehicles])
    old_lanes = np.array([v.lane for v in snapshot.vehicles])
    old_speeds = np.array([v.speed for v in snapshot.vehicles])
    xs, lanes, speeds = old_xs.copy(), old_lanes.copy(), old_speeds.copy()
    nominal = config.speed_ms
    half = config.lanes_per_direction

    units = _mobility_units(snapshot)
    unit_of = np.empty(len(xs), dtype=int)
    for u, unit in enumerate(units):
        unit_of[unit] = u
    wrapped = np.zeros(len(units), dtype=bool)

    for u, unit in enumerate(units):
        speed = speeds[unit[0]]
        if config.speed_noise > 0:
            speed += gen.normal(0.0, config.speed_noise * nominal)
        speed = float(np.clip(speed, 0.8 * nominal, 1.2 * nominal))
        speeds[unit] = speed
        direction = config.direction(int(lanes[unit[0]]))
        xs[unit] += direction * speed * dt

        if half > 1 and config.lane_change_probability > 0 and (
            gen.random() < config.lane_change_probability
        ):
            lane = int(lanes[unit[0]])
            group_lo = 0 if direction > 0 else half
            candidates = [
                c for c in (lane - 1, lane + 1) if group_lo <= c < group_lo + half
            ]
            target = int(gen.choice(candidates))
            others = np.ones(len(xs), dtype=bool)
            others[unit] = False
            if all(
                _lane_is_free(xs[others], lanes[others], float(xs[k]), target, config.min_gap)
                for k in unit
            ):
                lanes[unit] = target

        span = float(xs[unit].max() - xs[unit].min())
        if xs[unit].max() > config.road_length:
            xs[unit] -= config.road_length - span
            wrapped[u] = True
        elif xs[unit].min() < 0:
            xs[unit] += config.road_length - span
            wrapped[u] = True

    _resolve_gap_conflicts(
        config, units, unit_of, wrapped, (old_xs, old_lanes, old_speeds), (xs, lanes, speeds)
    )

    vehicles = tuple(
        replace(
            v,
            x=float(xs[k]),
            y=config.lane_y(int(lanes[k])),
            lane=int(lanes[k]),
            speed=float(speeds[k]),
        )
        for k, v in enumerate(snapshot.vehicles)
    )
    return replace(
        snapshot, vehicles=vehicles, step_in_rollout=snapshot.step_in_rollout + 1
    )


def _resolve_gap_conflicts(
    config: HighwayConfig,
    units: list[list[int]],
    unit_of: np.ndarray,
    wrapped: np.ndarray,
    old: tuple[np.ndarray, np.ndarray, np.ndarray],
    new: tuple[np.ndarray, np.ndarray, np.ndarray],
) -> None:
    """Cap or hold back followers in place until no same-lane gap is violated."""
    old_xs, old_lanes, old_speeds = old
    xs, lanes, speeds = new
    capped = np.zeros(len(units), dtype=bool)
    held = np.zeros(len(units), dtype=bool)

    def front(u: int, positions: np.ndarray) -> float:
        direction = config.direction(int(lanes[units[u][0]]))
        return float(np.max(direction * positions[units[u]]))

    def hold(u: int) -> None:
        unit = units[u]
        xs[unit], lanes[unit], speeds[unit] = old_xs[unit], old_lanes[unit], old_speeds[unit]
        held[u] = True

    # each unit is capped at most once and held at most once
    for _ in range(2 * len(units) + 1):
        pending = [
            (a, b)
            for a, b in _gap_conflicts(xs, lanes, unit_of, config.min_gap - _GAP_SLACK)
            if not (held[a] and held[b])
        ]
        if not pending:
            return
        a, b = pending[0]
        if held[a] or held[b]:
            follower, leader = (b, a) if held[a] else (a, b)
        elif wrapped[a] != wrapped[b]:
            follower, leader = (a, b) if wrapped[a] else (b, a)
        else:
            follower, leader = (a, b) if front(a, old_xs) < front(b, old_xs) else (b, a)

        unit = units[follower]
        if capped[follower] or wrapped[follower] or lanes[unit[0]] != old_lanes[unit[0]]:
            hold(follower)
            continue
        direction = config.direction(int(lanes[unit[0]]))
        leader_rear = float(np.min(direction * xs[units[leader]]))
        shift = leader_rear - config.min_gap - _GAP_SLACK - front(follower, xs)
        if front(follower, xs) + shift < front(follower, old_xs):
            hold(follower)
            continue
        xs[unit] += direction * shift
        speeds[unit] = speeds[units[leader][0]]
        capped[follower] = True
        logger.debug(f"Unit {follower} capped {-shift:.3f} m behind unit {leader}")

    logger.debug("Same-lane gap conflicts remain from the previous snapshot")


def _density_split(n_samples: int) -> list[int]:
    base, extra = divmod(n_samples, len(DENSITY_LEVELS))
    return [base + (1 if k < extra else 0) for k in range(len(DENSITY_LEVELS))]


def generate_dataset(
    config: HighwayConfig,
    num_v2v_links: int,
    num_v2i_links: int,
    spec: DatasetSpec,
) -> Dataset:
    """
    Generate a training dataset from mobility rollouts.

    Samples are split evenly across the three density/speed pairs; within a
    density level, rollouts of ``spec.rollout_length`` control intervals are
    sampled every 100 ms. Deterministic under ``spec.seed``.
    """
    snapshots: list[TopologySnapshot] = []
    rollout_id = 0
    for level_index, (density, count) in enumerate(
        zip(DENSITY_LEVELS, _density_split(spec.n_samples), strict=True)
    ):
        level_config = config.with_density(density)
        gen = np.random.default_rng([spec.seed, _TRAIN_STREAM, level_index])
        produced = 0
        while produced < count:
            current = generate_initial_topology(
                level_config, num_v2v_links, num_v2i_links, None, gen
            )
            current = replace(current, rollout_id=rollout_id, step_in_rollout=0)
            for step in range(min(spec.rollout_length, count - produced)):
                if step:
                    current = step_mobility(current, level_config, CONTROL_INTERVAL, gen)
                snapshots.append(replace(current, sample_id=len(snapshots)))
                produced += 1
            rollout_id += 1
        logger.debug(f"Generated {count} samples at density {density} veh/km")

    logger.info(
        f"Generated dataset with {len(snapshots)} samples "
        f"(L={num_v2v_links}, M={num_v2i_links}, seed={spec.seed})"
    )
    return Dataset(
        num_v2v_links=num_v2v_links,
        num_v2i_links=num_v2i_links,
        snapshots=snapshots,
        seed=spec.seed,
        sampling_mode=spec.sampling_mode,
    )


def test_topologies(
    config: HighwayConfig,
    num_v2v_links: int,
    num_v2i_links: int,
    seed: int = 0,
) -> list[TopologySnapshot]:
    """
    The nine held-out topologies: every density level at every distance level.

    The three distance levels of one density share the same vehicle cluster,
    shifted along the road, so their BS distances are ordered by construction.
    Test topologies use a seed stream disjoint from any training dataset.
    """
    snapshots = []
    for level_index, density in enumerate(DENSITY_LEVELS):
        level_config = config.with_density(density)
        for distance_level in DistanceLevel:
            gen = np.random.default_rng([seed, _TEST_STREAM, level_index])
            snapshots.append(
                generate_initial_topology(
                    level_config,
                    num_v2v_links,
                    num_v2i_links,
                    distance_level,
                    gen,
                    sample_id=len(snapshots),
                )
            )
    return snapshots


# Keep pytest from collecting the public name above as a test.
test_topologies.__test__ = False  # type: ignore[attr-defined]


def sample_training_topologies(
    dataset: Dataset, k: int, rng: np.random.Generator | int | None = None
) -> list[TopologySnapshot]:
    """Draw ``k`` distinct samples from a training dataset."""
    if len(dataset) == 0:
        return []
    gen = _as_generator(rng)
    picks = gen.choice(len(dataset), size=min(k, len(dataset)), replace=False)
    return [dataset[int(i)] for i in sorted(picks)]


def min_same_lane_gap(snapshot: TopologySnapshot) -> float:
    """Smallest distance between two vehicles sharing a lane (inf if none)."""
    best = np.inf
    by_lane: dict[int, list[float]] = {}
    for vehicle in snapshot.vehicles:
        by_lane.setdefault(vehicle.lane, []).append(vehicle.x)
    for xs in by_lane.values():
        if len(xs) > 1:
            best = min(best, float(np.min(np.diff(np.sort(xs)))))
    return float(best)


def _dataset_frame(dataset: Dataset) -> pd.DataFrame:
    rows = [
        {
            "sample_id": snapshot.sample_id,
            "vehicle_id": vehicle.id,
            "role": vehicle.role.value,
            "link_id": vehicle.link_id,
            "x": vehicle.x,
            "y": vehicle.y,
            "lane": vehicle.lane,
            "speed": vehicle.speed,
            "density": snapshot.density_level,
            "distance_level": snapshot.distance_level.value if snapshot.distance_level else "",
            "rollout_id": snapshot.rollout_id,
            "step_in_rollout": snapshot.step_in_rollout,
        }
        for snapshot in dataset.snapshots
        for vehicle in snapshot.vehicles
    ]
    return pd.DataFrame(rows, columns=VehicleRecord.field_names())


def save_dataset(dataset: Dataset, path: str | Path) -> Path:
    """
    Write a dataset as CSV: a ``#`` JSON metadata line, a header, one row per vehicle.

    Floats are written in their shortest round-trip form, so loading the file
    restores every position exactly.
    """
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    bs = dataset.snapshots[0].bs_position if dataset.snapshots else None
    meta = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "num_v2v_links": dataset.num_v2v_links,
        "num_v2i_links": dataset.num_v2i_links,
        "seed": dataset.seed,
        "sampling_mode": dataset.sampling_mode.value,
        "bs_position": list(bs) if bs else None,
    }
    with target.open("w", encoding="utf-8", newline="") as handle:
        handle.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        _dataset_frame(dataset).to_csv(handle, index=False, lineterminator="\n")
    logger.info(f"Wrote {len(dataset)} samples to {target}")
    return target


def _snapshot_from_records(
    records: list[VehicleRecord], meta: dict, line: int, offset: int
) -> TopologySnapshot:
    n_v2v = int(meta["num_v2v_links"])
    n_v2i = int(meta["num_v2i_links"])
    if len(records) != 2 * n_v2v + n_v2i:
        raise DatasetFormatError(
            f"sample {records[0].sample_id} has {len(records)} vehicles, "
            f"expected {2 * n_v2v + n_v2i}",
            line=line,
            byte_offset=offset,
        )
    vehicles = tuple(
        Vehicle(
            id=r.vehicle_id,
            x=r.x,
            y=r.y,
            lane=r.lane,
            speed=r.speed,
            role=r.role,
            link_id=r.link_id,
        )
        for r in records
    )
    first = records[0]
    return TopologySnapshot(
        vehicles=vehicles,
        num_v2v_links=n_v2v,
        num_v2i_links=n_v2i,
        bs_position=tuple(meta["bs_position"]),  # type: ignore[arg-type]
        sample_id=first.sample_id,
        density_level=first.density,
        distance_level=first.distance_level,
        rollout_id=first.rollout_id,
        step_in_rollout=first.step_in_rollout,
    )


def _read_metadata(first_line: str) -> dict[str, Any]:
    if not first_line.startswith("# "):
        raise DatasetFormatError("missing metadata line", line=1, byte_offset=0)
    try:
        meta = json.loads(first_line[2:])
    except json.JSONDecodeError as err:
        raise DatasetFormatError(f"invalid metadata: {err}", line=1, byte_offset=0) from err
    if not isinstance(meta, dict) or meta.get("format") != DATASET_FORMAT:
        found = meta.get("format") if isinstance(meta, dict) else meta
        raise DatasetFormatError(
            f"unknown dataset format {found!r}", line=1, byte_offset=0
        )
    return meta


def load_dataset(path: str | Path) -> Dataset:
    """
    Read a dataset written by :func:`save_dataset`.

    Rows are tokenized by pandas and typed through :class:`VehicleRecord`.

    Raises:
        DatasetFormatError: For malformed or truncated records, with the line
            number and byte offset of the offending record
        OSError: If the file cannot be read
    """
    raw = Path(path).read_bytes()
    newlines = np.flatnonzero(np.frombuffer(raw, dtype=np.uint8) == ord("\n"))
    # line_starts[k] is the byte offset of line k + 1
    line_starts = np.concatenate([[0], newlines + 1]).astype(int)

    def offset_of(line: int) -> int:
        return int(line_starts[line - 1]) if 0 < line <= len(line_starts) else len(raw)

    if raw and not raw.endswith(b"\n"):
        line = len(newlines) + 1
        raise DatasetFormatError(
            f"truncated record at line {line}, byte offset {offset_of(line)}",
            line=line,
            byte_offset=offset_of(line),
        )
    first_line = raw[: newlines[0]] if newlines.size else raw
    meta = _read_metadata(first_line.decode("utf-8"))

    try:
        frame = pd.read_csv(io.BytesIO(raw), skiprows=1, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError as err:
        raise DatasetFormatError("missing header", line=2, byte_offset=len(raw)) from err
    except pd.errors.ParserError as err:
        match = re.search(r"line (\d+)", str(err))
        line = int(match.group(1)) if match else 0
        raise DatasetFormatError(
            f"malformed record at line {line}: {err}",
            line=line or None,
            byte_offset=offset_of(line) if line else None,
        ) from err
    if list(frame.columns) != VehicleRecord.field_names():
        header = ",".join(str(c) for c in frame.columns)
        raise DatasetFormatError(
            f"unexpected header {header!r}", line=2, byte_offset=offset_of(2)
        )

    records: list[VehicleRecord] = []
    for row, values in enumerate(frame.fillna("").itertuples(index=False, name=None)):
        try:
            records.append(cast(VehicleRecord, VehicleRecord.from_record(list(values))))
        except ValueError as err:
            line = row + 3
            raise DatasetFormatError(
                f"malformed record at line {line}, byte offset {offset_of(line)}: {err}",
                line=line,
                byte_offset=offset_of(line),
            ) from err

    snapshots: list[TopologySnapshot] = []
    start = 0
    for row in range(1, len(records) + 1):
        if row == len(records) or records[row].sample_id != records[start].sample_id:
            line = start + 3
            snapshots.append(
                _snapshot_from_records(records[start:row], meta, line, offset_of(line))
            )
            start = row

    logger.info(f"Loaded {len(snapshots)} samples from {path}")
    return Dataset(
        num_v2v_links=int(meta["num_v2v_links"]),
        num_v2i_links=int(meta["num_v2i_links"]),
        snapshots=snapshots,
        seed=int(meta.get("seed", 0)),
        sampling_mode=SamplingMode(meta.get("sampling_mode", SamplingMode.RANDOM.value)),
    )
