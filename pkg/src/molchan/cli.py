"""Command-line interface.

Subcommands:
  run <config>          execute a scenario, write CSVs + report
  sweep-delta <config>  voxel-size sweep of a scenario
  detect <csv>          threshold symbol detection on a method CSV
  compare <csvA> <csvB> comparison metrics between two method CSVs

Exit codes: 0 success, 2 configuration error, 3 solver error.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from molchan import expcli
from molchan.expcli import ConfigError, GridMismatch


def _build_parser():
    p = argparse.ArgumentParser(prog="molchan",
                                description="diffusive molecular-communication channel models")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario config")
    run.add_argument("config")
    run.add_argument("--out", default="out", help="output directory")
    run.add_argument("--seed", type=int, default=None, help="override the config seed")
    run.add_argument("--workers", type=int, default=None, help="replicate worker processes")

    sw = sub.add_parser("sweep-delta", help="voxel-size sweep of a scenario")
    sw.add_argument("config")
    sw.add_argument("--out", default="out")
    sw.add_argument("--workers", type=int, default=None)

    det = sub.add_parser("detect", help="threshold symbol detection on a CSV")
    det.add_argument("csv")
    det.add_argument("--threshold", type=float, required=True)
    det.add_argument("--duration", type=float, required=True)
    det.add_argument("--receiver", type=int, default=0)

    cmp_ = sub.add_parser("compare", help="compare two method CSVs (B is reference)")
    cmp_.add_argument("csv_a")
    cmp_.add_argument("csv_b")
    cmp_.add_argument("--receiver", type=int, default=None,
                      help="restrict to one receiver (default: all)")
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            sc = expcli.load_scenario(args.config)
            try:
                report = expcli.run_scenario(sc, args.out, workers=args.workers,
                                             seed=args.seed)
            except ConfigError:
                raise
            except Exception as exc:
                print(f"solver error: {exc}", file=sys.stderr)
                return 3
            print(json.dumps(report["methods"], indent=2, sort_keys=True))
            print(f"wrote {len(sc.methods)} CSV file(s) and report.json to {args.out}")
            return 0

        if args.command == "sweep-delta":
            sc = expcli.load_scenario(args.config)
            try:
                report = expcli.sweep_delta(sc, args.out, workers=args.workers)
            except ConfigError:
                raise
            except Exception as exc:
                print(f"solver error: {exc}", file=sys.stderr)
                return 3
            for row in report["convergence"]:
                print(f"delta chi/{row['pair'][0]} vs chi/{row['pair'][1]} "
                      f"receiver {row['receiver']}: relRMSE {row['rel_rmse']:.4%}")
            return 0

        if args.command == "detect":
            grid, method, mean, _ = expcli.read_csv(args.csv)
            symbols = expcli.detect_symbols(mean[args.receiver], grid,
                                            args.threshold, args.duration)
            print(symbols)
            return 0

        if args.command == "compare":
            grid_a, meth_a, mean_a, _ = expcli.read_csv(args.csv_a)
            grid_b, meth_b, mean_b, _ = expcli.read_csv(args.csv_b)
            receivers = ([args.receiver] if args.receiver is not None
                         else range(mean_a.shape[0]))
            for r in receivers:
                rel, absolute, pd, ptd = expcli.compare_series(
                    mean_a[r], mean_b[r], grid_a, grid_b)
                kind = "absRMSE" if absolute else "relRMSE"
                print(f"receiver {r}: {kind}({meth_a} vs {meth_b}) = {rel:.6g}  "
                      f"peak diff {pd:+.6g}  peak time diff {ptd:+.6g}")
            return 0
    except (ConfigError, GridMismatch, expcli.EmptyWindow, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
