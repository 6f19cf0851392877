"""
Evaluation protocol, aggregation over seeds, and result reports.
"""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from scipy import stats

from .exceptions import AggregationError, ConfigurationError
from .games import InterferenceGameEnv, Policy, run_episode
from .models import (
    EvaluationRecord,
    NormalizationBounds,
    ResultCell,
    ResultTable,
    TopologySnapshot,
)
from .oracles import normalize_return

logger = logging.getLogger(__name__)

N_EVAL_EPISODES = 9
CI_Z = 1.96
_EVAL_STREAM = 3

MANIFEST_FILE = "manifest.json"
LOG_FILE = "log.csv"
CHECKPOINT_FILE = "final.ckpt"
LOG_COLUMNS = ("episode", "eval_index", "mean_return", "normalized_return")
REPORT_FORMATS = ("csv", "json", "plot-data")


def evaluate_policy(
    policy: Policy,
    env: InterferenceGameEnv,
    topologies: Sequence[TopologySnapshot],
    bounds: NormalizationBounds,
    n_episodes: int = N_EVAL_EPISODES,
    seed: int = 0,
    eval_index: int = 0,
    episode: int = 0,
) -> EvaluationRecord:
    """
    Run ``n_episodes`` noise-free episodes, cycling through ``topologies``.

    A single-location task passes its one training topology and gets nine
    episodes on it; multi-location tasks pass the nine test topologies and get
    one episode each.

    Args:
        policy: Acting policy (greedy learner, oracle, random)
        env: Environment used for evaluation only
        topologies: Evaluation topologies, pinned per episode
        bounds: Normalization anchors of the task
        n_episodes: Episodes per evaluation point
        seed: Run seed; with ``eval_index`` it fixes the fading stream
        eval_index: Index of this evaluation point
        episode: Training episodes completed before this evaluation

    Returns:
        The evaluation record with raw and normalized returns per episode

    Raises:
        ConfigurationError: If no topologies are given
        DegenerateBoundsError: If the bounds cannot normalize
    """
    if not topologies:
        raise ConfigurationError("evaluation needs at least one topology")
    env.rng = np.random.default_rng([seed, _EVAL_STREAM, eval_index])
    chosen = [topologies[k % len(topologies)] for k in range(n_episodes)]
    returns = [run_episode(env, policy, topology) for topology in chosen]
    normalized = [float(normalize_return(g, bounds)) for g in returns]
    return EvaluationRecord(
        seed=seed,
        eval_index=eval_index,
        episode=episode,
        topology_ids=[t.topology_id for t in chosen],
        returns=returns,
        normalized_returns=normalized,
    )


def records_frame(records: Iterable[EvaluationRecord]) -> pd.DataFrame:
    """Training log rows of a run, one per evaluation point."""
    rows = [
        {
            "episode": r.episode,
            "eval_index": r.eval_index,
            "mean_return": r.mean_return,
            "normalized_return": r.normalized_return,
        }
        for r in records
    ]
    return pd.DataFrame(rows, columns=list(LOG_COLUMNS))


def aggregate_curves(
    task: str, algorithm: str, curves: Mapping[int, Sequence[float]]
) -> ResultCell:
    """
    Max over evaluation points of the across-seed mean, with its 95% CI.

    The interval half-width is 1.96 times the standard error (ddof=1) over
    seeds at the chosen point; a single seed gives zero width.

    Raises:
        AggregationError: If no curves are given or their lengths differ
    """
    if not curves:
        raise AggregationError(f"no completed runs for {task}/{algorithm}")
    lengths = {len(c) for c in curves.values()}
    if len(lengths) != 1:
        raise AggregationError(
            f"mismatched evaluation counts for {task}/{algorithm}: {sorted(lengths)}",
            {"task": task, "algorithm": algorithm, "counts": sorted(lengths)},
        )
    seeds = sorted(curves)
    matrix = np.asarray([curves[s] for s in seeds], dtype=float)
    mean_curve = matrix.mean(axis=0)
    best = int(np.argmax(mean_curve))
    at_best = matrix[:, best]
    half_width = 0.0
    if len(seeds) > 1:
        half_width = float(CI_Z * stats.sem(at_best, ddof=1))
        if not math.isfinite(half_width):
            half_width = 0.0
    return ResultCell(
        task=task,
        algorithm=algorithm,
        max_normalized_return=float(mean_curve[best]),
        ci_half_width=half_width,
        best_eval_index=best,
        seeds=seeds,
        curves=matrix,
    )


def _read_run(run_dir: Path) -> tuple[dict[str, Any], pd.DataFrame] | None:
    manifest_path = run_dir / MANIFEST_FILE
    if not manifest_path.exists():
        raise AggregationError(f"{run_dir} has no {MANIFEST_FILE}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("status") != "ok":
        logger.warning(f"Skipping failed run {run_dir}: {manifest.get('error')}")
        return None
    log = pd.read_csv(run_dir / LOG_FILE)
    missing = set(LOG_COLUMNS) - set(log.columns)
    if missing:
        raise AggregationError(f"{run_dir / LOG_FILE} lacks columns {sorted(missing)}")
    return manifest, log


def find_run_dirs(root: str | Path) -> list[Path]:
    """Every directory below ``root`` holding a run manifest."""
    return sorted(p.parent for p in Path(root).rglob(MANIFEST_FILE))


def aggregate(run_dirs: Iterable[str | Path]) -> ResultTable:
    """
    Combine completed runs into a result table, one cell per (task, algorithm).

    Raises:
        AggregationError: If no run completed or evaluation counts disagree
    """
    grouped: dict[tuple[str, str], dict[int, list[float]]] = {}
    for raw in run_dirs:
        loaded = _read_run(Path(raw))
        if loaded is None:
            continue
        manifest, log = loaded
        key = (manifest["task_label"], manifest["algorithm"])
        curve = log.sort_values("eval_index")["normalized_return"].astype(float).tolist()
        grouped.setdefault(key, {})[int(manifest["seed"])] = curve
    if not grouped:
        raise AggregationError("no completed runs to aggregate")
    cells = [aggregate_curves(task, algo, curves) for (task, algo), curves in sorted(grouped.items())]
    logger.info(f"Aggregated {sum(len(c.seeds) for c in cells)} runs into {len(cells)} cells")
    return ResultTable(cells=cells)


def table_frame(table: ResultTable) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "task": c.task,
                "algorithm": c.algorithm,
                "max_normalized_return": c.max_normalized_return,
                "ci_half_width": c.ci_half_width,
                "best_eval_index": c.best_eval_index,
                "n_seeds": len(c.seeds),
                "formatted": c.formatted,
            }
            for c in table.cells
        ]
    )


def plot_frame(table: ResultTable) -> pd.DataFrame:
    """Long-form (task, algorithm, seed, eval_index, normalized_return) rows."""
    rows = [
        {
            "task": cell.task,
            "algorithm": cell.algorithm,
            "seed": seed,
            "eval_index": index,
            "normalized_return": float(value),
        }
        for cell in table.cells
        for seed, curve in zip(cell.seeds, cell.curves, strict=True)
        for index, value in enumerate(curve)
    ]
    return pd.DataFrame(
        rows, columns=["task", "algorithm", "seed", "eval_index", "normalized_return"]
    )


def report(table: ResultTable, fmt: str, path: str | Path) -> Path:
    """
    Write the result matrix as ``csv``, ``json`` or long-form ``plot-data`` CSV.

    Raises:
        ConfigurationError: For an unknown format
    """
    if fmt not in REPORT_FORMATS:
        raise ConfigurationError(f"unknown report format {fmt!r}", list(REPORT_FORMATS))
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        table_frame(table).to_csv(target, index=False)
    elif fmt == "plot-data":
        plot_frame(table).to_csv(target, index=False)
    else:
        payload = {
            "schema_version": table.schema_version,
            "cells": table_frame(table).to_dict(orient="records"),
        }
        target.write_text(json.dumps(payload, indent=2))
    logger.info(f"Wrote {fmt} report with {len(table.cells)} cells to {target}")
    return target
