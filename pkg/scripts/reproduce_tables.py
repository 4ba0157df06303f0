"""Rerun the simulation grid and write the appendix-style tables.

    python3 scripts/reproduce_tables.py --reps 100 --out results/tables

writes results/tables.csv (one row per scenario x method) and
results/tables.txt ("prop (over)" and "bias (rmse)" blocks). The full grid
with every method takes hours on one core; use --scenario and --methods to
pick cells.
"""

import argparse
import sys
import time
from pathlib import Path

from rankguard import simlab

CLASSICAL = "aic,bic,pc1,pc2,pc3,ic1,ic2,ic3,elbow"
CV = "wold,gabriel,ekk,bcv,wold:mad,gabriel:mad,ekk:mad,bcv:mad"
ROBUST = "dicmr,dic@0.23,rcc@0.23,bcv@0.23"


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--scenario", action="append", help="e.g. S11 or S21-decreasing; default: whole grid")
    ap.add_argument("--methods", default=",".join([CLASSICAL, CV, ROBUST]))
    ap.add_argument("--out", default="results/tables")
    args = ap.parse_args(argv)

    grid = simlab.scenario_grid(seed=args.seed)
    if args.scenario:
        wanted = set()
        for name in args.scenario:
            label, _, profile = name.upper().partition("-")
            wanted.add((label, (profile or "equal").lower()))
        grid = [s for s in grid if (s.label, s.profile) in wanted]
    methods = [m for m in args.methods.split(",") if m]

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report = simlab.BenchReport()
    for sc in grid:
        t0 = time.perf_counter()
        part = simlab.run_bench([sc], methods, args.reps, args.threads)
        report.results.extend(part.results)
        print(f"{sc.name}: {time.perf_counter() - t0:.0f}s", file=sys.stderr)
        # rewrite after every scenario so long runs leave usable partial output
        out.with_suffix(".csv").write_text(report.to_csv(), encoding="utf-8")
        out.with_suffix(".txt").write_text(report.to_text(), encoding="utf-8")
    print(report.to_text())


if __name__ == "__main__":
    main()
