"""Command-line harness: run experiments, summarize runs, inspect traces."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import load_config
from .errors import AflkdError
from .harness import (format_summary, run_to_files, staleness_histogram,
                      summarize_runs)
from .sim import read_trace_csv


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    out_dir = Path(args.out) if args.out else Path(cfg.out_dir)
    seeds = [args.seed] if args.seed is not None else list(cfg.seeds)
    for seed in seeds:
        result = run_to_files(cfg, seed, out_dir)
        last = result.records[-1]
        print(f"seed {seed}: {len(result.records)} records, "
              f"{last.server_updates} server updates, "
              f"best accuracy {result.best_accuracy:.4f} -> {out_dir}")
    return 0


def _cmd_summarize(args) -> int:
    summary = summarize_runs(args.runs, target_frac=args.target_frac,
                             target_abs=args.target, reference=args.reference)
    print(format_summary(summary))
    out = Path(args.runs) / "summary.json"
    with open(out, "w") as fh:
        json.dump(summary, fh, indent=2)
    print(f"wrote {out}")
    return 0


def _cmd_histogram(args) -> int:
    events = read_trace_csv(args.trace)
    bins, quantiles = staleness_histogram([e.staleness for e in events])
    print(f"{len(events)} arrivals")
    for k in sorted(bins):
        print(f"staleness {k:>4}: {bins[k]}")
    for name, value in quantiles.items():
        print(f"{name}: {value:g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aflkd",
        description="Seeded simulator for asynchronous federated learning strategies.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("--config", required=True, help="path to a JSON config")
    p_run.add_argument("--seed", type=int, default=None,
                       help="run a single seed instead of the config's list")
    p_run.add_argument("--out", default=None, help="output directory override")
    p_run.set_defaults(func=_cmd_run)

    p_sum = sub.add_parser("summarize", help="aggregate per-seed metrics CSVs")
    p_sum.add_argument("--runs", required=True,
                       help="directory with one subdirectory per strategy")
    p_sum.add_argument("--target-frac", type=float, default=0.85,
                       help="fraction of the reference best accuracy")
    p_sum.add_argument("--target", type=float, default=None,
                       help="absolute target accuracy (overrides the reference)")
    p_sum.add_argument("--reference", default="fedbuff",
                       help="strategy whose best accuracy sets the target")
    p_sum.set_defaults(func=_cmd_summarize)

    p_hist = sub.add_parser("histogram", help="staleness histogram of a trace CSV")
    p_hist.add_argument("--trace", required=True, help="path to a trace CSV")
    p_hist.set_defaults(func=_cmd_histogram)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except AflkdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
