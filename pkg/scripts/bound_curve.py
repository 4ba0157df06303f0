"""Lower bound on P(DICMR does not overestimate the rank) against log(n/p).

    python3 scripts/bound_curve.py --out results/bound_curve

writes the curve as CSV and, when matplotlib is available, as a PNG.
"""

import argparse
from pathlib import Path

import numpy as np

from rankguard import theory


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--alphas", default="0,0.25,0.5,0.75,1")
    ap.add_argument("--range", type=float, nargs=2, default=(-3.0, 3.0), metavar=("LO", "HI"))
    ap.add_argument("--steps", type=int, default=121)
    ap.add_argument("--out", default="results/bound_curve")
    args = ap.parse_args(argv)

    alphas = [float(a) for a in args.alphas.split(",")]
    rows = theory.bound_curve(alphas, tuple(args.range), args.steps)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = ["log_ratio,alpha,probability"] + [f"{lr:.10g},{a:g},{p:.12g}" for lr, a, p in rows]
    out.with_suffix(".csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return
    data = np.array(rows)
    fig, ax = plt.subplots(figsize=(6, 4))
    for a in alphas:
        sel = data[:, 1] == a
        ax.plot(data[sel, 0], data[sel, 2], label=f"alpha = {a:g}")
    ax.set_xlabel("log(n / p)")
    ax.set_ylabel("lower bound")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out.with_suffix(".png"), dpi=150)


if __name__ == "__main__":
    main()
