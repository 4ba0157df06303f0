"""Penalized rank-selection criteria, DICMR, elbow and threshold rules.

Every criterion produces a ``CriterionTrace`` over candidate ranks 0..r_max
whose selected rank is the smallest index attaining the minimum.
"""

import csv
import enum
import json
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate, optimize

from .dpdfit import DpdFit, DpdParams, fit_sequential, objective_excess
from .errors import InsufficientValues, InvalidAlpha, RankOutOfRange
from .matcore import SvdTriplets, as_matrix

# default robustness level for DICMR in the simulation setting
DEFAULT_ALPHA = 0.23


class CriterionKind(enum.Enum):
    AIC = "aic"
    BIC = "bic"
    PC1 = "pc1"
    PC2 = "pc2"
    PC3 = "pc3"
    IC1 = "ic1"
    IC2 = "ic2"
    IC3 = "ic3"
    DIC = "dic"
    RCC = "rcc"
    DICMR = "dicmr"

    @classmethod
    def parse(cls, name):
        try:
            return cls(str(name).lower())
        except ValueError:
            raise ValueError(f"unknown criterion {name!r}") from None


CLASSICAL_KINDS = (
    CriterionKind.AIC,
    CriterionKind.BIC,
    CriterionKind.PC1,
    CriterionKind.PC2,
    CriterionKind.PC3,
    CriterionKind.IC1,
    CriterionKind.IC2,
    CriterionKind.IC3,
)


@dataclass(frozen=True)
class Engine:
    """Source of the fitted triplets: ``alpha=None`` is the classical SVD."""

    alpha: float = None

    @property
    def robust(self):
        return self.alpha is not None

    @property
    def label(self):
        return "svd" if self.alpha is None else f"rsvddpd({self.alpha:g})"


CLASSICAL = Engine()


@dataclass
class CriterionTrace:
    kind: str
    values: np.ndarray
    selected: int
    alpha: float = 0.0
    ranks: np.ndarray = None
    diagnostics: object = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.ranks is None:
            self.ranks = np.arange(len(self.values))

    @classmethod
    def from_values(cls, kind, values, alpha=0.0, ranks=None):
        values = np.asarray(values, dtype=float)
        ranks = np.arange(len(values)) if ranks is None else np.asarray(ranks)
        # argmin returns the first minimizer, i.e. the smallest rank
        return cls(kind, values, int(ranks[int(np.argmin(values))]), alpha, ranks)

    def to_dict(self):
        return {
            "schema": "rankguard/1",
            "kind": self.kind,
            "alpha": float(self.alpha),
            "ranks": [int(r) for r in self.ranks],
            "values": [float(v) for v in self.values],
            "selected": int(self.selected),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["rank", "value"])
            for r, v in zip(self.ranks, self.values):
                w.writerow([int(r), repr(float(v))])


def c_phi_alpha(alpha):
    """Gaussian C constant, (2 pi)^(-alpha/2) (1 + alpha)^(-3/2)."""
    if alpha < 0:
        raise InvalidAlpha("alpha must be >= 0")
    return (2 * np.pi) ** (-alpha / 2) * (1 + alpha) ** -1.5


def dicmr_penalty(r, n, p, sigma, alpha):
    """Rank penalty of DICMR. ``sigma`` enters squared, as a noise variance."""
    return (
        r * (n + p) / (2 * n * p)
        * (2 * np.pi) ** (-alpha / 2)
        * (np.asarray(sigma, dtype=float) ** 2) ** (-alpha)
        * ((1 + alpha) / (1 + 2 * alpha)) ** 1.5
    )


def _check_fit(fit, alpha, r_max):
    if fit.rank < r_max:
        raise RankOutOfRange(f"fit has rank {fit.rank}, need {r_max}")
    if abs(fit.alpha - alpha) > 1e-12:
        raise InvalidAlpha(f"fit used alpha={fit.alpha}, criterion asked for {alpha}")


def dicmr_trace(X, alpha, r_max, fit: DpdFit = None) -> CriterionTrace:
    X = as_matrix(X)
    if not alpha > 0:
        raise InvalidAlpha("DICMR needs alpha > 0; use a classical criterion at alpha = 0")
    n, p = X.shape
    if fit is None:
        fit = fit_sequential(X, DpdParams(alpha=alpha), r_max)
    _check_fit(fit, alpha, r_max)
    r = np.arange(r_max + 1)
    values = fit.objective[: r_max + 1] + dicmr_penalty(r, n, p, fit.sigma[: r_max + 1], alpha)
    return CriterionTrace.from_values("dicmr", values, alpha)


def dicmr_h_excess(X, fit: DpdFit, r):
    """Residual-dependent part of the DICMR fit term at rank ``r``.

    Tends to the Gaussian likelihood term mean(residual^2) / (2 sigma^2) as alpha -> 0.
    """
    t = fit.triplets
    sub = SvdTriplets(t.values[:r], t.left[:, :r], t.right[:, :r])
    return objective_excess(X, sub, fit.sigma[r], fit.alpha)


@lru_cache(maxsize=64)
def mp_median(beta):
    """Median of the Marchenko-Pastur law with aspect ratio ``beta`` <= 1 and unit variance."""
    lo, hi = (1 - np.sqrt(beta)) ** 2, (1 + np.sqrt(beta)) ** 2

    def dens(theta):
        # x = lo + (hi - lo) sin^2(theta) removes the square-root endpoint singularities
        s2 = np.sin(theta) ** 2
        ratio = 1 / (hi - lo) if lo == 0 else s2 / (lo + (hi - lo) * s2)
        return (hi - lo) ** 2 * ratio * np.cos(theta) ** 2 / (np.pi * beta)

    def excess(t):
        return integrate.quad(dens, 0.0, t, limit=200)[0] - 0.5

    theta = optimize.brentq(excess, 0.0, np.pi / 2, xtol=1e-14)
    return lo + (hi - lo) * np.sin(theta) ** 2


def mp_noise_variance(singular_values, n, p):
    """Noise variance from the median singular value, scaled by the Marchenko-Pastur median."""
    beta = min(n, p) / max(n, p)
    return float(np.median(singular_values) ** 2 / (max(n, p) * mp_median(beta)))


def _penalty(kind, r, n, p, sigma2, pc1_literal=False):
    m = min(n, p)
    if kind in (CriterionKind.PC1, CriterionKind.IC1):
        # the printed log((n+p)/np) is negative; Bai and Ng use log(np/(n+p))
        g = np.log((n + p) / (n * p)) if pc1_literal else np.log(n * p / (n + p))
        base = r * g / (n * p)
    elif kind in (CriterionKind.PC2, CriterionKind.IC2):
        base = r * np.log(m) / (n * p)
    elif kind in (CriterionKind.PC3, CriterionKind.IC3):
        base = r * np.log(m) / m
    elif kind is CriterionKind.AIC:
        base = r * (n + p - r) / (n * p)
    elif kind is CriterionKind.BIC:
        base = r * (n + p - r) * np.log(n * p) / (n * p)
    else:
        raise ValueError(f"{kind} has no classical penalty")
    if kind in (CriterionKind.IC1, CriterionKind.IC2, CriterionKind.IC3):
        return base
    return base * sigma2


def residual_mean_squares(X, r_max, engine=CLASSICAL, fit=None):
    """Mean squared residual after 0..r_max fitted triplets of the engine."""
    X = as_matrix(X)
    n, p = X.shape
    if not 0 <= r_max <= min(n, p):
        raise RankOutOfRange(f"rank {r_max} outside [0, {min(n, p)}]")
    if not engine.robust:
        s = np.linalg.svd(X, compute_uv=False)
        total = float(np.sum(X * X))
        tail = total - np.concatenate([[0.0], np.cumsum(s[:r_max] ** 2)])
        return np.maximum(tail, 0.0) / (n * p)
    if fit is None:
        fit = fit_sequential(X, DpdParams(alpha=engine.alpha), r_max)
    out = []
    R = X.copy()
    out.append(float(np.mean(R * R)))
    t = fit.triplets
    for k in range(r_max):
        R = R - t.values[k] * np.outer(t.left[:, k], t.right[:, k])
        out.append(float(np.mean(R * R)))
    return np.array(out)


def noise_variance(X, r_max, method="mp", msr=None):
    """Common noise variance plugged into the classical rows.

    ``mp`` uses the Marchenko-Pastur median rule and ``rmax`` the residual
    mean square of the largest candidate model.
    """
    X = as_matrix(X)
    n, p = X.shape
    if method == "mp":
        return mp_noise_variance(np.linalg.svd(X, compute_uv=False), n, p)
    if method == "rmax":
        if msr is None:
            msr = residual_mean_squares(X, r_max)
        return float(msr[r_max])
    raise ValueError(f"unknown noise variance method {method!r}")


def classical_trace(
    kind,
    X,
    r_max,
    engine=CLASSICAL,
    fit=None,
    sigma0="mp",
    dic_table_exponent=False,
    pc1_literal=False,
) -> CriterionTrace:
    """One row of the criteria table evaluated over ranks 0..r_max.

    AIC/BIC/PC/IC rows evaluate the Gaussian fit term at a common noise
    variance s0^2, so 2 H s0^2 is the residual mean square. DIC and RCC need a
    robust engine and use the DPD objective directly.
    """
    kind = CriterionKind.parse(kind.value if isinstance(kind, CriterionKind) else kind)
    X = as_matrix(X)
    n, p = X.shape
    r = np.arange(r_max + 1)
    if kind is CriterionKind.DICMR:
        raise ValueError("use dicmr_trace for DICMR")
    if kind in (CriterionKind.DIC, CriterionKind.RCC):
        if not engine.robust or not engine.alpha > 0:
            raise InvalidAlpha(f"{kind.name} needs a robust engine with alpha > 0")
        a = engine.alpha
        if fit is None:
            fit = fit_sequential(X, DpdParams(alpha=a), r_max)
        _check_fit(fit, a, r_max)
        h = fit.objective[: r_max + 1]
        if kind is CriterionKind.RCC:
            pen = r * np.log(n) / (2 * n)
        else:
            expo = 1 + r / 2 if dic_table_exponent else 1.5
            pen = r * (a + 1) * (2 * np.pi) ** (-a / 2) * ((1 + a) / (1 + 2 * a)) ** expo
        return CriterionTrace.from_values(kind.value, h + pen, a)
    msr = residual_mean_squares(X, r_max, engine, fit)
    s2 = noise_variance(X, r_max, sigma0, msr if not engine.robust else None)
    if s2 <= 0:
        warnings.warn("noise variance estimate is zero; using the floor 1e-16")
        s2 = 1e-16
    pen = _penalty(kind, r, n, p, s2, pc1_literal)
    if kind in (CriterionKind.IC1, CriterionKind.IC2, CriterionKind.IC3):
        values = msr / s2 + pen
    else:
        values = msr + pen
    return CriterionTrace.from_values(kind.value, values, engine.alpha or 0.0)


def elbow(values):
    """Rank at the sharpest change of slope in a screeplot (1-based)."""
    lam = np.sort(np.asarray(values, dtype=float))[::-1]
    if len(lam) < 3:
        raise InsufficientValues("elbow needs at least 3 values")
    d = -np.diff(lam)
    second = d[:-1] - d[1:]
    # ties of the maximum go to the smallest index; 1e-12 absorbs rounding
    best = np.max(second)
    return int(np.flatnonzero(second >= best - 1e-12 * max(1.0, abs(best)))[0]) + 1


def threshold_rank(values, tau):
    """Number of leading values above ``tau``."""
    lam = np.asarray(values, dtype=float)
    above = np.flatnonzero(lam > tau)
    return int(above[-1] + 1) if len(above) else 0
