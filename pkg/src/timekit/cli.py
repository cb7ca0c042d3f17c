"""timekit command line: generate, run, resume, eval-only, ingest-check.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric divergence,
5 I/O error (1 for anything unexpected).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from timekit import metrics, synth
from timekit.config import OUTPUT_ROOT_ENV, RunConfig, build_config, read_config_file
from timekit.data import DataError, ingest_interactions, partition_periods
from timekit.forecaster import PAIRINGS, ForecastDivergence
from timekit.numgrad import NonFiniteError, ShapeError
from timekit.pipeline import PipelineError
from timekit.workflow import StageError, eval_only, execute_run, load_run_config

log = logging.getLogger("timekit")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4, 5


def exit_code(exc: BaseException) -> int:
    """Classify by the innermost recognised exception in the cause chain."""
    chain = []
    while exc is not None and exc not in chain:
        chain.append(exc)
        exc = exc.__cause__
    for e in reversed(chain):
        if isinstance(e, (DataError, metrics.MetricError)):
            return EXIT_DATA
        if isinstance(e, (ForecastDivergence, NonFiniteError, FloatingPointError)):
            return EXIT_DIVERGED
        if isinstance(e, (synth.ConfigError, PipelineError, ShapeError)):
            return EXIT_CONFIG
        if isinstance(e, OSError):
            return EXIT_IO
    return EXIT_CONFIG if isinstance(chain[-1], ValueError) else 1


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file (one section per stage)")
    g = p.add_argument_group("run config overrides")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool":
            g.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            g.add_argument(flag, dest=f.name, default=None, metavar=f.type.upper())


def _flag_values(args) -> dict:
    return {f.name: getattr(args, f.name) for f in fields(RunConfig) if getattr(args, f.name, None) is not None}


def config_from_args(args, base: RunConfig | None = None) -> RunConfig:
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    return build_config(file_values, _flag_values(args), base=base).validate()


def cmd_generate(cfg: RunConfig, out=None) -> Path:
    out = out or sys.stdout
    data = synth.generate(cfg.drift_config())
    directory = Path(cfg.output_dir) if cfg.output_dir else Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / "synthetic"
    path = synth.write_dataset(data, directory)
    print(f"wrote {len(data.users)} interactions to {path}", file=out)
    return path


def cmd_run(cfg: RunConfig, run_dir=None, out=None):
    out = out or sys.stdout
    outcome = execute_run(cfg, run_dir)
    out.write(metrics.format_table(outcome.rows))
    print(f"run directory: {outcome.run_dir}", file=out)
    return outcome


def cmd_resume(run_dir, args=None, out=None):
    out = out or sys.stdout
    base = load_run_config(run_dir)
    cfg = config_from_args(args, base=base) if args is not None else base.validate()
    outcome = execute_run(cfg, run_dir, resume=True)
    out.write(metrics.format_table(outcome.rows))
    return outcome


def cmd_eval_only(run_dir, pairing=None, k=None, as_csv=False, out=None) -> list[dict]:
    out = out or sys.stdout
    rows = eval_only(run_dir, pairing, k)
    out.write(metrics.format_csv(rows) if as_csv else metrics.format_table(rows))
    return rows


def cmd_ingest_check(path, granularity: int = 1, out=None) -> None:
    out = out or sys.stdout
    raw = ingest_interactions(path)
    ds = partition_periods(raw, granularity)
    print(f"records {len(raw)}  users {raw.num_users}  items {raw.num_items}  periods {ds.num_periods}", file=out)
    for i, p in enumerate(ds.periods, 1):
        users = len(np.unique(p.users)) if len(p) else 0
        print(f"  period {i:>3}  boundary {p.boundary}  interactions {len(p):>8}  active users {users:>7}", file=out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="timekit", description="Embedding-forecasting recommender experiments")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic drifting interaction log")
    _add_config_flags(p)

    p = sub.add_parser("run", help="ingest, train snapshots and forecasters, evaluate")
    _add_config_flags(p)

    p = sub.add_parser("resume", help="continue a run from its last completed stage")
    p.add_argument("run_dir")
    _add_config_flags(p)

    p = sub.add_parser("eval-only", help="recompute metrics from stored snapshots")
    p.add_argument("run_dir")
    p.add_argument("--pairing", choices=["original", *PAIRINGS], default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--csv", action="store_true", help="print the machine-readable rows")

    p = sub.add_parser("ingest-check", help="parse a log and report its period split")
    p.add_argument("dataset")
    p.add_argument("--granularity", type=int, default=1)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "generate":
            cmd_generate(config_from_args(args))
        elif args.command == "run":
            cmd_run(config_from_args(args))
        elif args.command == "resume":
            cmd_resume(args.run_dir, args)
        elif args.command == "eval-only":
            cmd_eval_only(args.run_dir, args.pairing, args.k, args.csv)
        elif args.command == "ingest-check":
            cmd_ingest_check(args.dataset, args.granularity)
    except (StageError, synth.ConfigError, DataError, PipelineError, ValueError, OSError, FloatingPointError) as exc:
        print(f"timekit {args.command}: error: {exc}", file=sys.stderr)
        return exit_code(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
