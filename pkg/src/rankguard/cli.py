"""Command-line entry point: ``rankguard <command> ...``.

Exit codes: 0 success, 1 data or runtime error, 2 usage error.
"""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import criteria as crit
from . import crossval as cv
from . import impute as imp
from . import simlab, theory
from .errors import RankGuardError, RankOutOfRange, ShapeError
from .matcore import BlockPartition, load_csv, save_csv

SCHEMA = "rankguard/1"
CV_METHODS = ("wold", "gabriel", "ekk", "ekk_scaled", "bcv")
RANK_METHODS = tuple(k.value for k in crit.CriterionKind) + CV_METHODS + ("elbow", "threshold")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _float_list(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _write(path, text):
    if path is None or str(path) == "-":
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    else:
        Path(path).write_text(text, encoding="utf-8")


def _engine(args):
    if args.engine == "rsvddpd":
        return crit.Engine(args.alpha if args.alpha is not None else crit.DEFAULT_ALPHA)
    return crit.CLASSICAL


def _cv_style(method, args):
    if args.cv_style is None:
        if method == "bcv":
            return cv.Bcv(n_holdouts=args.holdouts, seed=args.seed)
        if method.startswith("ekk"):
            return cv.Ekk(scaled=method == "ekk_scaled", seed=args.seed)
        if method == "wold":
            return cv.WoldSpeckled(seed=args.seed)
        return None
    try:
        nr, nc = (int(x) for x in args.cv_style.lower().split("x"))
    except ValueError:
        raise UsageError(f"--cv-style expects NRxNC, got {args.cv_style!r}") from None
    if method == "gabriel":
        return cv.GabrielBlock(nr, nc)
    if method == "bcv":
        return cv.Bcv(nr, nc, args.holdouts, args.seed)
    raise UsageError("--cv-style applies to gabriel and bcv only")


def cmd_rank(args):
    X = load_csv(args.input, args.header)
    n, p = X.shape
    r_max = args.rank_max if args.rank_max is not None else max(1, min(n, p) // 2)
    if r_max > min(n, p):
        raise RankOutOfRange(f"--rank-max {r_max} exceeds min(n, p) = {min(n, p)}")
    method = args.method
    engine = _engine(args)
    if method == "dicmr":
        alpha = args.alpha if args.alpha is not None else crit.DEFAULT_ALPHA
        trace = crit.dicmr_trace(X, alpha, r_max)
    elif method in CV_METHODS:
        trace = cv.run_cv(method, X, r_max, cv.ScaleMeasure(args.scale_measure), engine, _cv_style(method, args))
    elif method in ("elbow", "threshold"):
        if engine.robust:
            from .dpdfit import DpdParams, fit_sequential

            values = fit_sequential(X, DpdParams(alpha=engine.alpha), min(n, p)).triplets.values
        else:
            values = np.linalg.svd(X, compute_uv=False)
        if method == "elbow":
            selected = crit.elbow(values[: r_max + 2])
        else:
            if args.threshold is None:
                raise UsageError("threshold needs --threshold TAU")
            selected = min(crit.threshold_rank(values, args.threshold), r_max)
        trace = crit.CriterionTrace(method, values, selected, engine.alpha or 0.0, np.arange(1, len(values) + 1))
    else:
        trace = crit.classical_trace(method, X, r_max, engine)
    payload = trace.to_dict()
    payload["method"] = method
    payload["engine"] = engine.label
    if args.out:
        if str(args.out).endswith(".csv"):
            trace.to_csv(args.out)
        else:
            _write(args.out, json.dumps(payload, indent=2))
    print(f"selected_rank: {trace.selected}")
    return 0


def _scenarios(args):
    grid = simlab.scenario_grid(seed=args.seed)
    if args.scenario_grid:
        return grid
    picked = []
    for name in args.scenario:
        label, _, profile = name.partition("-")
        profile = profile or "equal"
        if profile == "dec":
            profile = "decreasing"
        try:
            picked.append(simlab.find_scenario(label, profile, seed=args.seed))
        except KeyError as exc:
            raise UsageError(str(exc.args[0])) from None
    return picked


def cmd_bench(args):
    if not args.scenario_grid and not args.scenario:
        raise UsageError("give --scenario or --scenario-grid")
    methods = []
    for spec in args.methods.split(","):
        m = simlab.Method.parse(spec)
        if m.name not in RANK_METHODS + ("oracle",) or m.name == "threshold":
            raise UsageError(f"unknown bench method {spec!r}")
        methods.append(m)
    report = simlab.run_bench(_scenarios(args), methods, args.reps, args.threads, args.rank_max)
    if args.out:
        base = Path(args.out)
        base.with_suffix(".csv").write_text(report.to_csv(), encoding="utf-8")
        base.with_suffix(".txt").write_text(report.to_text(), encoding="utf-8")
    else:
        sys.stdout.write(report.to_csv())
    print(report.to_text(), file=sys.stderr if not args.out else sys.stdout)
    return 0


def cmd_bound(args):
    if args.steps < 2:
        raise UsageError("--steps must be >= 2")
    rows = theory.bound_curve(args.alpha_list, (args.logratio_min, args.logratio_max), args.steps, not args.generic)
    lines = ["log_ratio,alpha,probability"] + [f"{lr:.10g},{a:g},{pr:.12g}" for lr, a, pr in rows]
    _write(args.out, "\n".join(lines) + "\n")
    return 0


def _parse_block(text):
    try:
        rows, cols = text.split(",")
        r0, r1 = (int(x) for x in rows.split(":"))
        c0, c1 = (int(x) for x in cols.split(":"))
    except ValueError:
        raise UsageError(f"--missing-block expects r0:r1,c0:c1, got {text!r}") from None
    return r0, r1, c0, c1


def _partition(shape, block):
    r0, r1, c0, c1 = block
    n, p = shape
    if not (0 <= r0 < r1 <= n and 0 <= c0 < c1 <= p):
        raise RankOutOfRange(f"missing block {r0}:{r1},{c0}:{c1} outside a {n}x{p} matrix")
    rows = [i for i in range(n) if not r0 <= i < r1]
    cols = [j for j in range(p) if not c0 <= j < c1]
    return BlockPartition(rows, cols)


def _parse_rank(text):
    if text == "dicmr":
        return "dicmr"
    if text.startswith("fixed:"):
        try:
            return int(text.split(":", 1)[1])
        except ValueError:
            pass
    raise UsageError(f"--rank expects fixed:K or dicmr, got {text!r}")


def _impute_setup(args):
    X = load_csv(args.input, args.header)
    block = _parse_block(args.missing_block)
    part = _partition(X.shape, block)
    truth = None
    if args.truth:
        truth = load_csv(args.truth, args.header)
        r0, r1, c0, c1 = block
        if truth.shape == X.shape:
            truth = truth[r0:r1, c0:c1]
        elif truth.shape != (r1 - r0, c1 - c0):
            raise ShapeError(f"truth of shape {truth.shape} matches neither the matrix nor the block")
    return X, block, part, truth


def _monitor(args, X, part, truth, grid):
    rows = imp.monitor_alpha(X, part, grid, truth, _parse_rank(args.rank), args.normalize)
    for row in rows:
        if row["error"]:
            print(f"alpha={row['alpha']:g} failed: {row['error']}", file=sys.stderr)
    _write(args.out, imp.monitor_csv(rows))
    return 0


def cmd_impute(args):
    X, block, part, truth = _impute_setup(args)
    if args.alpha_grid is not None:
        return _monitor(args, X, part, truth, args.alpha_grid)
    cfg = imp.ImputeConfig(part, args.alpha, _parse_rank(args.rank), args.normalize)
    res = imp.block_impute(X, cfg, truth)
    out = X.copy()
    r0, r1, c0, c1 = block
    out[r0:r1, c0:c1] = res.X22_hat
    if args.out:
        save_csv(args.out, out)
    print(f"selected_rank: {res.selected_rank}")
    if res.relative_rmse is not None:
        print(f"rel_rmse: {res.relative_rmse:.6g}")
    return 0


def cmd_monitor(args):
    X, _, part, truth = _impute_setup(args)
    return _monitor(args, X, part, truth, args.alpha_grid)


def cmd_simulate(args):
    sc = simlab.find_scenario(args.scenario, args.profile, seed=args.seed)
    inst = simlab.generate(sc, args.rep)
    save_csv(args.out, inst.X)
    if args.truth_out:
        save_csv(args.truth_out, inst.L)
    print(f"true_rank: {inst.true_rank}")
    return 0


def build_parser():
    p = _Parser(prog="rankguard", description="Robust rank selection for noisy low-rank matrices.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("rank", help="estimate the rank of a CSV matrix")
    r.add_argument("input")
    r.add_argument("--method", choices=RANK_METHODS, default="dicmr")
    r.add_argument("--alpha", type=float)
    r.add_argument("--rank-max", type=int)
    r.add_argument("--engine", choices=("svd", "rsvddpd"), default="svd")
    r.add_argument("--cv-style", help="holdout block size NRxNC for gabriel and bcv")
    r.add_argument("--holdouts", type=_positive_int, default=64, help="number of BCV holdouts")
    r.add_argument("--scale-measure", choices=("mse", "mae", "mad"), default="mse")
    r.add_argument("--threshold", type=float, help="singular value cutoff for --method threshold")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--header", action="store_true", help="skip the first CSV line")
    r.add_argument("--out", help="trace output (.json or .csv)")
    r.set_defaults(func=cmd_rank)

    b = sub.add_parser("bench", help="Monte Carlo benchmark over the simulation scenarios")
    g = b.add_mutually_exclusive_group()
    g.add_argument("--scenario-grid", action="store_true")
    g.add_argument("--scenario", action="append", help="label such as S01 or S21-decreasing (repeatable)")
    b.add_argument("--methods", default="pc3,ic3,dicmr")
    b.add_argument("--reps", type=_positive_int, default=100)
    b.add_argument("--threads", type=_positive_int, default=os.cpu_count() or 1)
    b.add_argument("--rank-max", type=int)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", help="output prefix; writes PREFIX.csv and PREFIX.txt")
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("bound", help="lower bound on the probability of not overestimating the rank")
    c.add_argument("--alpha-list", type=_float_list, default=[0.0, 0.25, 0.5, 0.75, 1.0])
    c.add_argument("--logratio-min", type=float, default=-3.0)
    c.add_argument("--logratio-max", type=float, default=3.0)
    c.add_argument("--steps", type=int, default=61)
    c.add_argument("--generic", action="store_true", help="use the generic-density constant")
    c.add_argument("--out")
    c.set_defaults(func=cmd_bound)

    for name, func, help_ in (
        ("impute", cmd_impute, "complete a missing corner block"),
        ("monitor", cmd_monitor, "selected rank and error along an alpha grid"),
    ):
        m = sub.add_parser(name, help=help_)
        m.add_argument("input")
        m.add_argument("--missing-block", required=True, help="r0:r1,c0:c1 (0-based, end exclusive)")
        if name == "impute":
            a = m.add_mutually_exclusive_group()
            a.add_argument("--alpha", type=float, default=0.75)
            a.add_argument("--alpha-grid", type=_float_list)
        else:
            m.add_argument("--alpha-grid", type=_float_list, required=True)
        m.add_argument("--normalize", action=argparse.BooleanOptionalAction, default=True)
        m.add_argument("--rank", default="dicmr", help="fixed:K or dicmr")
        m.add_argument("--truth", help="CSV with the true values (full matrix or the block)")
        m.add_argument("--header", action="store_true")
        m.add_argument("--out")
        m.set_defaults(func=func)

    s = sub.add_parser("simulate", help="write one simulated scenario matrix as CSV")
    s.add_argument("--scenario", default="S01")
    s.add_argument("--profile", choices=simlab.PROFILES, default="equal")
    s.add_argument("--rep", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--truth-out")
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (RankGuardError, OSError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
