"""Overestimation-probability bound for DICMR and the divergence constants behind it.

Gaussian closed forms are paired with a quadrature oracle that works for any
bounded symmetric density with a derivative.
"""

from dataclasses import dataclass

import numpy as np
from scipy import integrate, stats

from .errors import DomainError, InvalidAlpha

QUAD_LIMIT = 12.0
QUAD_TOL = 1e-10


@dataclass(frozen=True)
class BoundInputs:
    alpha: float
    c: float

    def __post_init__(self):
        if self.alpha < 0:
            raise InvalidAlpha(f"alpha must be >= 0, got {self.alpha}")
        if not self.c > 0:
            raise DomainError(f"ratio c must be positive, got {self.c}")


@dataclass(frozen=True)
class DivergenceConstants:
    a_alpha: float
    b_alpha: float
    c_alpha: float
    norm_f: float


def _check_alpha(alpha):
    if alpha < 0:
        raise InvalidAlpha(f"alpha must be >= 0, got {alpha}")


def constants_gaussian(alpha) -> DivergenceConstants:
    _check_alpha(alpha)
    k = (2 * np.pi) ** (-alpha / 2)
    return DivergenceConstants(
        a_alpha=k * ((1 + alpha) ** -0.5 - (1 + alpha) ** -1.5),
        b_alpha=k * (1 + alpha) ** -2.5 * (alpha**2 + 4 * alpha + 6),
        c_alpha=k * (1 + alpha) ** -1.5,
        norm_f=k * (1 + alpha) ** -0.5,
    )


def _quad(g):
    val, _ = integrate.quad(g, -QUAD_LIMIT, QUAD_LIMIT, epsabs=QUAD_TOL, epsrel=QUAD_TOL, limit=200)
    return val


def constants_quadrature(alpha, f=None, df=None) -> DivergenceConstants:
    """Numerical integration of the constants for a symmetric density ``f``.

    ``df`` is the derivative of ``f``. Both default to the standard normal.
    A integrates (f + |x| f') f^a and B integrates
    f^(1+a) - 2 |x| f' f^a + x^2 f'^2 f^(a-1), with f and f' taken at |x|.
    """
    _check_alpha(alpha)
    if f is None:
        f = stats.norm.pdf
        df = lambda x: -x * stats.norm.pdf(x)  # noqa: E731

    def a_int(x):
        ax = abs(x)
        fx = f(ax)
        return (fx + ax * df(ax)) * fx**alpha

    def b_int(x):
        ax = abs(x)
        fx = f(ax)
        if fx <= 0:
            return 0.0
        d = df(ax)
        return fx ** (1 + alpha) - 2 * ax * d * fx**alpha + ax * ax * d * d * fx ** (alpha - 1)

    def c_int(x):
        ax = abs(x)
        fx = f(ax)
        return 0.0 if fx <= 0 else df(ax) ** 2 * fx ** (alpha - 1)

    return DivergenceConstants(
        a_alpha=_quad(a_int),
        b_alpha=_quad(b_int),
        c_alpha=_quad(c_int),
        norm_f=_quad(lambda x: f(x) ** (1 + alpha)),
    )


def _ratio_factor(c):
    if not c > 0:
        raise DomainError(f"ratio c must be positive, got {c}")
    return (1 + c) / (2 * np.sqrt(c))


def t_alpha_closed(alpha, c) -> float:
    """Gaussian closed form of t; equals sqrt(2) at alpha = 0, c = 1."""
    _check_alpha(alpha)
    a = alpha
    bracket = (2 + 4 * a * a) / (1 + 2 * a) ** 2.5 - a * a / (1 + a) ** 3
    if bracket <= 0:
        raise DomainError(f"bracket {bracket:.3g} is not positive at alpha={alpha}")
    return float(_ratio_factor(c) * (2 + a * a) / (1 + a) ** 3.5 / np.sqrt(bracket))


def t_alpha_generic(alpha, c, consts=None, consts_2a=None) -> float:
    """Generic-density t built from the constants at alpha and 2 alpha.

    With Gaussian constants this gives sqrt(6) at alpha = 0, c = 1, a factor
    sqrt(3) above the closed form; both are exposed.
    """
    _check_alpha(alpha)
    consts = consts or constants_gaussian(alpha)
    consts_2a = consts_2a or constants_gaussian(2 * alpha)
    radicand = consts_2a.b_alpha - consts.a_alpha**2
    if radicand <= 0:
        raise DomainError(f"non-positive radicand {radicand:.3g}")
    return float(
        _ratio_factor(c)
        * consts_2a.c_alpha
        / (consts.c_alpha * consts.norm_f)
        * consts.b_alpha
        / np.sqrt(radicand)
    )


def bound_from_t(t) -> float:
    return 0.5 + 0.5 * max(0.0, 1.0 - t**-2)


def overestimation_bound(alpha, c, use_closed=True) -> float:
    """Lower bound on the probability that DICMR does not overestimate the rank."""
    t = t_alpha_closed(alpha, c) if use_closed else t_alpha_generic(alpha, c)
    return bound_from_t(t)


def bound_curve(alpha_list, logratio_range=(-3.0, 3.0), steps=61, use_closed=True):
    """Rows of (log(n/p), alpha, probability) over an even grid of log ratios."""
    if steps < 2:
        raise DomainError("bound curve needs at least 2 steps")
    lo, hi = logratio_range
    grid = np.linspace(lo, hi, steps)
    rows = []
    for alpha in alpha_list:
        for lr in grid:
            rows.append((float(lr), float(alpha), overestimation_bound(alpha, float(np.exp(lr)), use_closed)))
    return rows
