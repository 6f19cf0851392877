"""Command-line interface: ``v2xbench <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any, NoReturn

from .config import BenchConfig
from .evaluation import REPORT_FORMATS, aggregate, find_run_dirs, report
from .exceptions import V2XBenchError
from .harness import (
    ExperimentConfig,
    cds_report,
    evaluate_run,
    experiment_bounds,
    run_experiment,
    topology_bounds,
    topology_set,
)
from .models import Algorithm, DatasetSpec, SamplingMode, Task
from .oracles import BoundsCache
from .topology import generate_dataset, save_dataset

logger = logging.getLogger(__name__)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Argument parser reporting usage errors as one line."""

    def error(self, message: str) -> NoReturn:
        raise UsageError(message)


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML config file mapping sections to keys")
    parser.add_argument("--seed", type=int, help="Seed (single run / generation)")
    parser.add_argument("--scale", type=float, help="Episode budget multiplier")
    parser.add_argument("--out", help="Output directory")
    parser.add_argument("-L", "--num-v2v", dest="num_v2v_links", type=int, help="V2V links")
    parser.add_argument("-M", "--num-v2i", dest="num_v2i_links", type=int, help="V2I links")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="Override one config key, e.g. training.lr=1e-4",
    )
    parser.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Logging level",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="v2xbench", description="C-V2X interference game MARL benchmark")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("gen-data", help="Generate a training dataset")
    _common(gen)
    gen.add_argument("--n-samples", type=int, help="Number of snapshots")
    gen.add_argument("--sampling-mode", choices=[m.value for m in SamplingMode])
    gen.add_argument("--output", help="Dataset file (default under --out/datasets)")

    train = sub.add_parser("train", help="Train one (task, algorithm) cell")
    _common(train)
    train.add_argument("--task", choices=[t.value for t in Task])
    train.add_argument("--algo", choices=[a.value for a in Algorithm])
    train.add_argument("--topology", help="Topology id for single-location tasks")
    train.add_argument("--dataset", help="Training dataset path")
    train.add_argument("--seeds", help="Comma separated seeds (default 0..4)")
    train.add_argument("--workers", type=int, help="Parallel seed processes")

    evaluate = sub.add_parser("evaluate", help="Re-evaluate a finished run")
    _common(evaluate)
    evaluate.add_argument("--run-dir", required=True, help="Run directory with manifest.json")

    oracle = sub.add_parser("oracle", help="Compute normalization bounds")
    _common(oracle)
    oracle.add_argument("--task", choices=[t.value for t in Task])
    oracle.add_argument("--topology-set", choices=["test", "train"], default="test")

    cds = sub.add_parser("cds", help="Coordination difficulty scores")
    _common(cds)
    cds.add_argument("--topology-set", choices=["test", "train"], default="test")

    agg = sub.add_parser("aggregate", help="Aggregate run directories into a result table")
    _common(agg)
    agg.add_argument("--runs", help="Root of run directories (default --out)")

    rep = sub.add_parser("report", help="Write the result matrix")
    _common(rep)
    rep.add_argument("--runs", help="Root of run directories (default --out)")
    rep.add_argument("--format", choices=list(REPORT_FORMATS), default="csv")
    rep.add_argument("--output", help="Report file")
    return parser


def load_config(args: argparse.Namespace) -> BenchConfig:
    """File, environment, then flags; later layers win."""
    config = BenchConfig.from_file(args.config) if args.config else BenchConfig()
    config.apply_env()
    for item in args.overrides:
        target, sep, value = item.partition("=")
        section, dot, key = target.partition(".")
        if not sep or not dot:
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        config.set(section.strip(), key.strip(), value.strip())
    flags: dict[str, Any] = {
        "scale": args.scale,
        "out_dir": args.out,
        "num_v2v_links": args.num_v2v_links,
        "num_v2i_links": args.num_v2i_links,
    }
    for name, key in (
        ("task", "task"),
        ("algo", "algorithm"),
        ("topology", "topology"),
        ("dataset", "dataset_path"),
        ("workers", "workers"),
        ("n_samples", "n_train_samples"),
        ("sampling_mode", "sampling_mode"),
    ):
        flags[key] = getattr(args, name, None)
    seeds = getattr(args, "seeds", None)
    if seeds:
        flags["seeds"] = seeds
    elif args.seed is not None:
        flags["seeds"] = str(args.seed)
    config.update("experiment", {k: (str(v) if v is not None else None) for k, v in flags.items()})
    return config


def _emit(payload: dict[str, Any]) -> None:
    print(json.dumps(payload, sort_keys=True))


def cmd_gen_data(args: argparse.Namespace, experiment: ExperimentConfig) -> None:
    seed = args.seed if args.seed is not None else experiment.dataset_seed
    spec = DatasetSpec(experiment.train_samples, experiment.sampling_mode, seed)
    dataset = generate_dataset(
        experiment.highway, experiment.num_v2v_links, experiment.num_v2i_links, spec
    )
    path = Path(args.output) if args.output else experiment.resolved_dataset_path()
    save_dataset(dataset, path)
    _emit({"path": str(path), "samples": len(dataset)})


def cmd_train(args: argparse.Namespace, experiment: ExperimentConfig) -> None:
    result = run_experiment(experiment)
    for outcome in result.outcomes:
        _emit(
            {
                "seed": outcome.seed,
                "run_dir": str(outcome.run_dir),
                "status": outcome.status,
                "records": len(outcome.records),
                "error": outcome.error,
            }
        )
    if result.failures and len(result.failures) == len(result.outcomes):
        raise V2XBenchError(f"all {len(result.outcomes)} seeds failed")


def cmd_evaluate(args: argparse.Namespace, experiment: ExperimentConfig) -> None:
    record = evaluate_run(args.run_dir)
    _emit(
        {
            "run_dir": args.run_dir,
            "topology_ids": record.topology_ids,
            "returns": record.returns,
            "mean_return": record.mean_return,
            "normalized_return": record.normalized_return,
        }
    )


def cmd_oracle(args: argparse.Namespace, experiment: ExperimentConfig) -> None:
    cache = BoundsCache(experiment.resolved_bounds_path())
    topologies = topology_set(experiment, args.topology_set)
    if experiment.task.is_single_location:
        for topology in topologies:
            _emit(topology_bounds(experiment, experiment.task, topology, cache).to_dict())
    else:
        _emit(experiment_bounds(experiment, topologies, cache).to_dict())


def cmd_cds(args: argparse.Namespace, experiment: ExperimentConfig) -> None:
    cache = BoundsCache(experiment.resolved_bounds_path())
    for topology in topology_set(experiment, args.topology_set):
        _emit(cds_report(experiment, topology, cache).to_dict())


def _runs_root(args: argparse.Namespace, experiment: ExperimentConfig) -> Path:
    return Path(args.runs) if args.runs else Path(experiment.out_dir)


def cmd_aggregate(args: argparse.Namespace, experiment: ExperimentConfig) -> None:
    table = aggregate(find_run_dirs(_runs_root(args, experiment)))
    for cell in table.cells:
        _emit(
            {
                "task": cell.task,
                "algorithm": cell.algorithm,
                "result": cell.formatted,
                "best_eval_index": cell.best_eval_index,
                "seeds": cell.seeds,
            }
        )


def cmd_report(args: argparse.Namespace, experiment: ExperimentConfig) -> None:
    table = aggregate(find_run_dirs(_runs_root(args, experiment)))
    suffix = "json" if args.format == "json" else "csv"
    stem = "plot_data" if args.format == "plot-data" else "results"
    output = Path(args.output) if args.output else Path(experiment.out_dir) / f"{stem}.{suffix}"
    _emit({"path": str(report(table, args.format, output)), "cells": len(table.cells)})


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "oracle": cmd_oracle,
    "cds": cmd_cds,
    "aggregate": cmd_aggregate,
    "report": cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    """
    Run the CLI.

    Returns:
        0 on success, 1 for benchmark errors, 2 for usage errors; errors are
        reported as one ``error: <Name>: <message>`` line on stderr
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=getattr(logging, args.log_level),
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )
        experiment = load_config(args).experiment()
        COMMANDS[args.command](args, experiment)
    except UsageError as err:
        print(f"error: UsageError: {err}", file=sys.stderr)
        return 2
    except V2XBenchError as err:
        print(f"error: {type(err).__name__}: {err.message}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
