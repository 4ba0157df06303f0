"""Robust SVD by minimum density power divergence (rSVDdpd).

Each singular triplet is fitted by alternating robust regressions on the rows
and columns of the current residual, with Gaussian DPD weights, and the noise
scale is re-estimated alongside. Triplets are extracted one at a time by
deflation, so ``sigma[k]`` is the scale left after k triplets.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateInput, InvalidAlpha, InvalidScale, RankOutOfRange, ShapeError
from .matcore import SvdTriplets, as_matrix, fix_signs

SCALE_FLOOR = 1e-8
MAD_CONSISTENCY = 1.4826
INIT_KINDS = ("auto", "classical", "clipped", "l1", "random")
L1_ROUNDS = 10


@dataclass(frozen=True)
class DpdParams:
    """Fitting options.

    ``init`` selects the rank-one starting point: ``classical`` is the leading
    SVD triplet of the residual, ``clipped`` the leading triplet after
    winsorizing the residual at ``clip`` robust standard deviations, ``l1``
    the clipped triplet refined by alternating least absolute deviation
    regressions, and ``random`` a seeded Gaussian direction. ``auto`` uses
    ``classical`` at alpha = 0 and otherwise whichever of ``classical`` and
    ``clipped`` starts at the lower objective; if that fit collapses onto the
    scale floor it is refitted from ``l1`` as well.

    ``restarts`` adds seeded random starts and keeps the best final
    objective. ``None`` means 10 restarts for matrices of at most 100 cells,
    where the objective has many local minima and a fit is cheap, and none
    otherwise.
    """

    alpha: float = 0.3
    tol: float = 1e-6
    max_iter: int = 100
    init: str = "auto"
    seed: int = 0
    clip: float = 3.0
    scale_iter: int = 3
    restarts: int = None

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise InvalidAlpha(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.init not in INIT_KINDS:
            raise ValueError(f"init must be one of {INIT_KINDS}")
        if self.restarts is not None and self.restarts < 0:
            raise ValueError("restarts must be >= 0")


@dataclass
class RankOneFit:
    """``history`` holds the objective minus its parameter-free constant, one entry per sweep."""

    lam: float
    u: np.ndarray
    v: np.ndarray
    sigma: float
    objective: float
    converged: bool
    iterations: int
    history: list = field(default_factory=list)


@dataclass
class DpdFit:
    """Sequential fit: ``sigma`` and ``objective`` have length rank + 1."""

    triplets: SvdTriplets
    sigma: np.ndarray
    objective: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray
    alpha: float
    histories: list = field(default_factory=list)

    @property
    def rank(self):
        return self.triplets.rank

    def max_ascent(self):
        """Largest single-iteration increase of the objective over all ranks.

        Measured on the shifted objective of ``RankOneFit.history``, which
        differs from the objective by a constant but keeps full precision
        for small alpha.
        """
        worst = 0.0
        for h in self.histories:
            if len(h) > 1:
                worst = max(worst, float(np.max(np.diff(h))))
        return worst


def _norm_const(alpha):
    return (2 * np.pi) ** (-alpha / 2)


def v_cell(x, mu, sigma, alpha):
    """DPD contribution of one cell under a Gaussian model (vectorized)."""
    if np.any(np.asarray(sigma) <= 0):
        raise InvalidScale("sigma must be positive")
    if alpha < 0:
        raise InvalidAlpha("alpha must be >= 0")
    z = (np.asarray(x, dtype=float) - mu) / sigma
    if alpha == 0:
        return 0.5 * z * z
    k = _norm_const(alpha)
    return sigma ** (-alpha) * k * ((1 + alpha) ** -0.5 - (1 + 1 / alpha) * np.exp(-alpha * z * z / 2))


def _h(R, sigma, alpha):
    if alpha == 0:
        return float(np.mean(R * R) / (2 * sigma * sigma))
    k = _norm_const(alpha)
    m = np.mean(np.exp(-alpha * R * R / (2 * sigma * sigma)))
    return float(sigma ** (-alpha) * k * ((1 + alpha) ** -0.5 - (1 + 1 / alpha) * m))


def _expm1_ratio(y):
    # expm1(y) / y, equal to 1 at y = 0
    y = np.asarray(y, dtype=float)
    safe = np.where(y == 0, 1.0, y)
    return np.where(y == 0, 1.0, np.expm1(safe) / safe)


def _scaled_loss(R, sigma, alpha):
    # (1 + 1/alpha) mean(1 - exp(-alpha q)), q = r^2 / (2 sigma^2), without dividing by alpha
    q = R * R / (2 * sigma * sigma)
    return float(np.mean(-np.expm1(-alpha * q)) + np.mean(q * _expm1_ratio(-alpha * q)))


def _excess(R, sigma, alpha):
    if alpha == 0:
        return float(np.mean(R * R) / (2 * sigma * sigma))
    return float(sigma ** (-alpha) * _norm_const(alpha) * _scaled_loss(R, sigma, alpha))


def _shifted(R, sigma, alpha):
    # _h minus its parameter-free part, computed without cancellation; tends to
    # log(sigma) + mean(r^2) / (2 sigma^2) as alpha -> 0
    if alpha == 0:
        return float(np.log(sigma) + np.mean(R * R) / (2 * sigma * sigma))
    k = _norm_const(alpha)
    x = -alpha * np.log(sigma)
    # (c - k) expm1(x) with c the constant term, split so no 1/alpha appears
    head = k * ((1 + alpha) ** -0.5 - 1) * np.expm1(x) + k * np.log(sigma) * float(_expm1_ratio(x))
    return float(head + sigma ** (-alpha) * k * _scaled_loss(R, sigma, alpha))


def _residual(X, triplets):
    if triplets.rank == 0:
        return X
    n, p = X.shape
    if triplets.left.shape[0] != n or triplets.right.shape[0] != p:
        raise ShapeError(
            f"triplets of shape {triplets.left.shape[0]}x{triplets.right.shape[0]} do not match {n}x{p}"
        )
    return X - triplets.reconstruct()


def objective_h(X, triplets, sigma, alpha):
    """Mean DPD cell contribution of the residual X - U D V^T at scale sigma."""
    X = np.asarray(X, dtype=float)
    if sigma <= 0:
        raise InvalidScale("sigma must be positive")
    return _h(_residual(X, triplets), sigma, alpha)


def objective_excess(X, triplets, sigma, alpha):
    """Residual-dependent part of ``objective_h``: H(residual) - H(0).

    The literal objective diverges like -1/alpha as alpha -> 0, while this
    difference tends to the Gaussian likelihood term mean(r^2) / (2 sigma^2).
    """
    X = np.asarray(X, dtype=float)
    if sigma <= 0:
        raise InvalidScale("sigma must be positive")
    return _excess(_residual(X, triplets), sigma, alpha)


def _robust_sd(R):
    med = np.median(R)
    return MAD_CONSISTENCY * float(np.median(np.abs(R - med)))


def _min_scale(R, alpha, start, max_iter=50):
    """Minimize the objective over sigma for a fixed residual.

    Uses the stationarity fixed point
    sigma^2 = mean(w r^2) / (mean(w) - alpha (1+alpha)^(-3/2)),
    w = exp(-alpha r^2 / (2 sigma^2)). The result is kept only if it does
    not raise the objective, so every call is a descent step.
    """
    if alpha == 0:
        return max(float(np.sqrt(np.mean(R * R))), SCALE_FLOOR)
    r2 = R * R
    shift = alpha * (1 + alpha) ** -1.5
    s = max(start, SCALE_FLOOR)
    for _ in range(max_iter):
        w = np.exp(-alpha * r2 / (2 * s * s))
        den = np.mean(w) - shift
        if den <= 0:
            s *= 2
            continue
        t = max(float(np.sqrt(np.mean(w * r2) / den)), SCALE_FLOOR)
        done = abs(t - s) <= 1e-10 * s
        s = t
        if done:
            break
    start = max(start, SCALE_FLOOR)
    return s if _shifted(R, s, alpha) <= _shifted(R, start, alpha) else start


def estimate_scale_rank0(X, alpha):
    """Scale minimizing the objective with no fitted component (root mean square at alpha = 0)."""
    X = np.asarray(X, dtype=float)
    if alpha < 0:
        raise InvalidAlpha("alpha must be >= 0")
    if not np.any(X):
        return SCALE_FLOOR
    start = _robust_sd(X) if alpha > 0 else 1.0
    if start <= SCALE_FLOOR:
        start = float(np.sqrt(np.mean(X * X)))
    return _min_scale(X, alpha, start, max_iter=500)


def _start(R, lam, u, v, alpha):
    """Scale and shifted objective at a candidate starting triplet."""
    E = R - lam * np.outer(u, v)
    start = _robust_sd(E) if alpha > 0 else 1.0
    if start <= SCALE_FLOOR:
        start = float(np.sqrt(np.mean(E * E)))
    s = _min_scale(E, alpha, start, max_iter=500)
    return s, _shifted(E, s, alpha)


def _weighted_median(R, u):
    """Per column of R, the b minimizing sum_i |R_ij - u_i b|."""
    keep = np.abs(u) > 1e-12 * np.max(np.abs(u))
    T = R[keep] / u[keep, None]
    w = np.abs(u[keep])
    order = np.argsort(T, axis=0)
    cw = np.cumsum(w[order], axis=0)
    pos = np.argmax(cw >= 0.5 * w.sum(), axis=0)
    return np.take_along_axis(T, order, axis=0)[pos, np.arange(R.shape[1])]


def _l1_refine(R, u):
    for _ in range(L1_ROUNDS):
        v = _weighted_median(R, u)
        if not np.any(v):
            break
        u = _weighted_median(R.T, v)
        if not np.any(u):
            break
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return None
    return float(nu * nv), u / nu, v / nv


def _initial_triplet(R, params, kind=None):
    kind = kind or params.init
    if kind == "auto":
        if params.alpha == 0:
            return _initial_triplet(R, params, "classical")
        best = None
        for k in ("classical", "clipped"):
            lam, u, v = _initial_triplet(R, params, k)
            s, h = _start(R, lam, u, v, params.alpha)
            if best is None or h < best[0]:
                best = (h, lam, u, v)
        return best[1:]
    if kind == "random":
        rng = np.random.default_rng(params.seed)
        u = rng.standard_normal(R.shape[0])
        v = rng.standard_normal(R.shape[1])
        u /= np.linalg.norm(u)
        v /= np.linalg.norm(v)
        lam = float(u @ R @ v)
        if lam < 0:
            lam, v = -lam, -v
        return lam, u, v
    if kind == "l1":
        lam, u, v = _initial_triplet(R, params, "clipped")
        out = _l1_refine(R, u)
        return out if out is not None else (lam, u, v)
    src = R
    if kind == "clipped":
        med = float(np.median(R))
        mad = _robust_sd(R)
        if mad > 0:
            src = np.clip(R, med - params.clip * mad, med + params.clip * mad)
    U, s, Vt = np.linalg.svd(src, full_matrices=False)
    if s[0] <= 1e-12 * np.linalg.norm(R):
        U, s, Vt = np.linalg.svd(R, full_matrices=False)
    return float(s[0]), U[:, 0], Vt[0]


def _weighted_update(R, W, other, fallback):
    # weighted least squares coefficient per row of R against ``other``
    den = W @ (other * other)
    num = (W * R) @ other
    ok = den > 0
    return np.where(ok, num / np.where(ok, den, 1.0), fallback)


SMALL_CELLS = 100
SMALL_RESTARTS = 10


def _alternate(R, params, lam, u, v):
    a = params.alpha
    s, obj = _start(R, lam, u, v, a)
    history = [obj]
    converged = False
    it = 0
    for it in range(1, params.max_iter + 1):
        lam_old = lam
        E = R - lam * np.outer(u, v)
        W = np.exp(-a * E * E / (2 * s * s)) if a > 0 else np.ones_like(R)
        coef = _weighted_update(R, W, v, lam * u)
        lam = float(np.linalg.norm(coef))
        if lam == 0:
            break
        u = coef / lam
        E = R - lam * np.outer(u, v)
        s = _min_scale(E, a, s, params.scale_iter)
        W = np.exp(-a * E * E / (2 * s * s)) if a > 0 else np.ones_like(R)
        coef = _weighted_update(R.T, W.T, u, lam * v)
        lam = float(np.linalg.norm(coef))
        if lam == 0:
            break
        v = coef / lam
        E = R - lam * np.outer(u, v)
        s = _min_scale(E, a, s, params.scale_iter)
        new = _shifted(E, s, a)
        history.append(new)
        small_obj = abs(obj - new) <= params.tol * max(abs(obj), 1e-300)
        small_lam = abs(lam - lam_old) <= params.tol * max(lam, 1e-300)
        obj = new
        if small_obj and small_lam:
            converged = True
            break
    U, V = fix_signs(u[:, None], v[:, None])
    E = R - lam * np.outer(u, v)
    return RankOneFit(lam, U[:, 0], V[:, 0], s, _h(E, s, a), converged, it, history)


def fit_rank_one(X, params: DpdParams) -> RankOneFit:
    """Leading robust triplet of X with its scale, by alternating IRLS."""
    R = as_matrix(X)
    n, p = R.shape
    if n < 2 or p < 2:
        raise ShapeError("fit_rank_one needs at least 2 rows and 2 columns")
    if not np.any(R):
        raise DegenerateInput("cannot fit a triplet to an all-zero matrix")
    best = _alternate(R, params, *_initial_triplet(R, params))
    if params.init == "auto" and params.alpha > 0 and best.sigma <= SCALE_FLOOR:
        # at the floor the objective rewards whichever cells are fitted exactly,
        # and fits stall on sub-blocks of exactly low-rank data
        f = _alternate(R, params, *_initial_triplet(R, params, "l1"))
        if f.history[-1] < best.history[-1]:
            best = f
    extra = params.restarts
    if extra is None:
        extra = SMALL_RESTARTS if n * p <= SMALL_CELLS and params.alpha > 0 else 0
    for k in range(extra):
        start = _initial_triplet(R, replace(params, seed=params.seed + 1 + k), "random")
        f = _alternate(R, params, *start)
        if f.history[-1] < best.history[-1]:
            best = f
    return best


def fit_sequential(X, params: DpdParams, r_max) -> DpdFit:
    """Fit ``r_max`` triplets by repeated rank-one fits on the deflated residual.

    Triplets are kept in extraction order, which for robust fits need not be
    exactly sorted by value.
    """
    X = as_matrix(X)
    n, p = X.shape
    if not 0 <= r_max <= min(n, p):
        raise RankOutOfRange(f"rank {r_max} outside [0, {min(n, p)}]")
    a = params.alpha
    s0 = estimate_scale_rank0(X, a)
    sigma = [s0]
    objective = [_h(X, s0, a)]
    lams, us, vs, conv, iters, hist = [], [], [], [], [], []
    R = X.copy()
    for k in range(r_max):
        if not np.any(R):
            # exact fit already reached: pad with zero triplets
            u = np.zeros(n)
            v = np.zeros(p)
            u[k % n] = 1.0
            v[k % p] = 1.0
            lams.append(0.0)
            us.append(u)
            vs.append(v)
            sigma.append(SCALE_FLOOR)
            objective.append(_h(R, SCALE_FLOOR, a))
            conv.append(True)
            iters.append(0)
            hist.append([_shifted(R, SCALE_FLOOR, a)])
            continue
        f = fit_rank_one(R, params)
        R = R - f.lam * np.outer(f.u, f.v)
        lams.append(f.lam)
        us.append(f.u)
        vs.append(f.v)
        sigma.append(f.sigma)
        objective.append(f.objective)
        conv.append(f.converged)
        iters.append(f.iterations)
        hist.append(f.history)
    if r_max:
        trip = SvdTriplets(np.array(lams), np.column_stack(us), np.column_stack(vs))
    else:
        trip = SvdTriplets.empty(n, p)
    return DpdFit(
        triplets=trip,
        sigma=np.array(sigma),
        objective=np.array(objective),
        converged=np.array(conv, dtype=bool),
        iterations=np.array(iters, dtype=int),
        alpha=a,
        histories=hist,
    )
