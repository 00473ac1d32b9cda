"""Command-line interface.

Subcommands cover the full pipeline: train the initial dynamics ensemble,
train the action transformer from it, run a benchmark suite, and post-process
records into summary tables and loss curves. Desk-scale defaults keep every
stage tractable on a laptop; ``--paper-scale`` restores the published
training volumes (50,000 dynamics samples, 75,000 transformer iterations).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .bench import (
    ConfigError,
    aggregate,
    export_loss_curves,
    load_config,
    read_records,
    run_suite,
    write_summary_csv,
)
from .dynamics import EnsembleDynamicsModel, train_initial_dynamics
from .flow import train_action_transformer

DESK_DYNAMICS_SAMPLES = 10_000
PAPER_DYNAMICS_SAMPLES = 50_000
DESK_AFM_ITERATIONS = 10_000
PAPER_AFM_ITERATIONS = 75_000


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="actionflow",
        description="Continual dynamics-learning benchmark with flow-matching "
                    "action transformation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-dynamics",
                       help="train the initial dynamics ensemble")
    p.add_argument("--out", default="dynamics.json", help="snapshot output path")
    p.add_argument("--samples", type=int, default=None,
                   help=f"training samples (default {DESK_DYNAMICS_SAMPLES})")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--domain-randomization", type=float, default=0.0,
                   metavar="FRAC",
                   help="multiplicative action perturbation, e.g. 0.1")
    p.add_argument("--streamx", action="store_true",
                   help="layer-normalized, sparsely initialized members for "
                        "streaming updates")
    p.add_argument("--learning-rate", type=float, default=3e-3)
    p.add_argument("--paper-scale", action="store_true")

    p = sub.add_parser("train-afm", help="train the action transformer")
    p.add_argument("--dynamics", required=True,
                   help="dynamics ensemble snapshot to generate data from")
    p.add_argument("--out", default="afm.json")
    p.add_argument("--iterations", type=int, default=None,
                   help=f"optimizer steps (default {DESK_AFM_ITERATIONS})")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--learning-rate", type=float, default=3e-3)
    p.add_argument("--paper-scale", action="store_true")

    p = sub.add_parser("run", help="run a benchmark suite")
    p.add_argument("--config", required=True, help="suite config JSON")
    p.add_argument("--out", default=None,
                   help="output directory (default: config output_dir)")
    p.add_argument("--jobs", type=int, default=1,
                   help="parallel episode workers")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("aggregate", help="summarize records into a CSV table")
    p.add_argument("--records", required=True,
                   help="records.ndjson file or its directory")
    p.add_argument("--out", default=None,
                   help="summary CSV path (default: alongside records)")

    p = sub.add_parser("curves", help="export smoothed loss curves")
    p.add_argument("--records", required=True)
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--window", type=int, default=20)

    return parser


def _cmd_train_dynamics(args) -> int:
    samples = args.samples if args.samples is not None else (
        PAPER_DYNAMICS_SAMPLES if args.paper_scale else DESK_DYNAMICS_SAMPLES)
    rng = np.random.default_rng(args.seed)
    kwargs = {}
    if args.streamx:
        kwargs.update(layer_norm=True, sparsity=0.9)
    model = train_initial_dynamics(
        n_samples=samples, action_noise_frac=args.domain_randomization,
        rng=rng, learning_rate=args.learning_rate, **kwargs)
    model.save(args.out)
    print(f"trained dynamics ensemble on {samples} samples -> {args.out}")
    return 0


def _cmd_train_afm(args) -> int:
    if not Path(args.dynamics).exists():
        print(f"error: dynamics snapshot not found: {args.dynamics}",
              file=sys.stderr)
        return 2
    iterations = args.iterations if args.iterations is not None else (
        PAPER_AFM_ITERATIONS if args.paper_scale else DESK_AFM_ITERATIONS)
    dynamics = EnsembleDynamicsModel.load(args.dynamics)
    model = train_action_transformer(
        dynamics, iterations=iterations, learning_rate=args.learning_rate,
        rng=np.random.default_rng(args.seed))
    model.save(args.out)
    print(f"trained action transformer for {iterations} iterations -> {args.out}")
    return 0


def _cmd_run(args) -> int:
    config = load_config(args.config)
    out_dir = args.out or config.output_dir
    if out_dir is None:
        print("error: no output directory (use --out or output_dir in the "
              "config)", file=sys.stderr)
        return 2

    def progress(record):
        if args.quiet:
            return
        status = record.get("status")
        detail = (f"success={record.get('success_rate'):.2f} "
                  f"steps={record.get('steps')}" if status == "ok"
                  else record.get("error"))
        print(f"[{record['method']} {record['map']} "
              f"({record['v_gain']:g},{record['omega_gain']:g}) "
              f"seed {record['seed']}] {status}: {detail}")

    results = run_suite(config, jobs=args.jobs, out_dir=out_dir,
                        progress=progress)
    rows = aggregate(results)
    write_summary_csv(rows, Path(out_dir) / "summary.csv")
    n_failed = len(results.failed)
    print(f"{len(results.records)} cells, {n_failed} failed; "
          f"records in {out_dir}")
    return 1 if n_failed else 0


def _cmd_aggregate(args) -> int:
    results = read_records(args.records)
    rows = aggregate(results)
    records_path = Path(args.records)
    base = records_path if records_path.is_dir() else records_path.parent
    out = Path(args.out) if args.out else base / "summary.csv"
    write_summary_csv(rows, out)
    print(f"wrote {out}")
    return 0


def _cmd_curves(args) -> int:
    results = read_records(args.records)
    records_path = Path(args.records)
    base = records_path if records_path.is_dir() else records_path.parent
    out = Path(args.out) if args.out else base / "curves"
    paths = export_loss_curves(results, out, window=args.window)
    print(f"wrote {len(paths)} curve files to {out}")
    return 0


_COMMANDS = {
    "train-dynamics": _cmd_train_dynamics,
    "train-afm": _cmd_train_afm,
    "run": _cmd_run,
    "aggregate": _cmd_aggregate,
    "curves": _cmd_curves,
}


def cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli())
