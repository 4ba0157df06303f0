"""Cross-validated rank estimators.

Four holdout schemes are provided (Wold speckled EM, Gabriel blocks,
Eastment-Krzanowski row/column deletion and Owen-Perry bi-cross-validation),
each aggregated by a scale measure of the cellwise prediction errors. The
robust variant runs the same classical estimator on a robust full-rank proxy
of the data.
"""

import enum
import warnings
from dataclasses import dataclass

import numpy as np

from . import _wold
from .criteria import CLASSICAL, CriterionTrace, Engine
from .dpdfit import DpdParams, fit_rank_one
from .errors import EmptyErrors, NoValidHoldouts, RankOutOfRange, ShapeError
from .matcore import PINV_FLOOR, BlockPartition, as_matrix, partial_pinv

CELL_CAP = 5000
OUTLIER_CUT = 5.0
REL_FLOOR = 1e-10


class ScaleMeasure(enum.Enum):
    MSE = "mse"
    MAE = "mae"
    MAD = "mad"


@dataclass(frozen=True)
class WoldSpeckled:
    cap: int = CELL_CAP
    em_tol: float = 1e-5
    em_max_iter: int = 50
    seed: int = 0


@dataclass(frozen=True)
class GabrielBlock:
    nr: int = 1
    nc: int = 1


@dataclass(frozen=True)
class Ekk:
    """``align`` pairs the two SVDs: ``procrustes`` rotates the row-deleted
    factors onto the column-deleted ones over the shared rows, ``sign`` only
    flips signs."""

    scaled: bool = False
    cap: int = CELL_CAP
    seed: int = 0
    align: str = "procrustes"

    def __post_init__(self):
        if self.align not in ("procrustes", "sign"):
            raise ValueError(f"unknown alignment {self.align!r}")


@dataclass(frozen=True)
class Bcv:
    nr: int = None
    nc: int = None
    n_holdouts: int = 64
    seed: int = 0


@dataclass
class CvDiagnostics:
    skipped: int = 0
    truncated: int = 0
    em_unconverged: int = 0


def aggregate(errors, measure=ScaleMeasure.MSE):
    """Scale of a sample of prediction errors (root mean square, mean absolute, or MAD)."""
    e = np.asarray(errors, dtype=float).ravel()
    if e.size == 0:
        raise EmptyErrors("no prediction errors to aggregate")
    measure = ScaleMeasure(measure)
    if measure is ScaleMeasure.MSE:
        return float(np.sqrt(np.mean(e * e)))
    if measure is ScaleMeasure.MAE:
        return float(np.mean(np.abs(e)))
    return float(np.median(np.abs(e - np.median(e))))


def _aggregate_ranks(errors, measure):
    # errors: (cells, ranks) -> one scale per rank
    return np.array([aggregate(errors[:, k], measure) for k in range(errors.shape[1])])


def _numerical_rank(s):
    if len(s) == 0:
        return 0
    floor = max(PINV_FLOOR, REL_FLOOR * s[0])
    return int(np.sum(s > floor))


def robust_proxy(X, alpha, cut=OUTLIER_CUT):
    """Full-rank robust reconstruction of X used as input to classical CV.

    Triplets are fitted one at a time on the deflated residual. After each
    fit, cells whose residual exceeds ``cut`` times the fitted scale are
    marked as outlying and their residual is set to zero, so the remaining
    triplets never chase them and the proxy keeps the low-rank prediction
    there. Deflation stops once the residual is exhausted.
    """
    X = as_matrix(X)
    n, p = X.shape
    out = np.zeros_like(X)
    R = X.copy()
    params = DpdParams(alpha=alpha)
    for _ in range(min(n, p)):
        if not np.any(R):
            break
        f = fit_rank_one(R, params)
        T = f.lam * np.outer(f.u, f.v)
        out += T
        R -= T
        R[np.abs(R) > cut * f.sigma] = 0.0
    return out


def _prepare(X, engine):
    X = as_matrix(X)
    if engine is not None and engine.robust:
        X = robust_proxy(X, engine.alpha)
    return X


def _check_rmax(r_max, limit):
    if not 1 <= r_max <= limit:
        raise RankOutOfRange(f"r_max {r_max} outside [1, {limit}]")


def _sample_cells(n, p, cap, seed):
    cells = np.array([(i, j) for i in range(n) for j in range(p)])
    if len(cells) > cap:
        rng = np.random.default_rng(seed)
        cells = cells[np.sort(rng.choice(len(cells), size=cap, replace=False))]
    return cells


def gabriel_predict(X, part: BlockPartition, r):
    """Predict the held block from the other three blocks through a rank-r generalized inverse."""
    X = as_matrix(X)
    part.check(X.shape)
    rows = np.array(part.rows)
    cols = np.array(part.cols)
    rc, cc = part.complement(X.shape)
    if r == 0:
        return np.zeros((len(rows), len(cols)))
    core = X[np.ix_(rc, cc)]
    if r > min(core.shape):
        raise RankOutOfRange(f"rank {r} exceeds the complement block size {core.shape}")
    return X[np.ix_(rows, cc)] @ partial_pinv(core, r) @ X[np.ix_(rc, cols)]


def _block_predictions(X, rows, cols, r_max, diag):
    """Predictions of block (rows, cols) for ranks 0..r_max, shape (r_max+1, |rows|, |cols|)."""
    n, p = X.shape
    rmask = np.ones(n, bool)
    rmask[rows] = False
    cmask = np.ones(p, bool)
    cmask[cols] = False
    core = X[np.ix_(rmask, cmask)]
    U, s, Vt = np.linalg.svd(core, full_matrices=False)
    k_num = _numerical_rank(s)
    if k_num < r_max:
        diag.truncated += 1
    k = min(k_num, r_max)
    left = X[np.ix_(rows, cmask)] @ Vt[:k].T / s[:k]
    right = U[:, :k].T @ X[np.ix_(rmask, cols)]
    out = np.zeros((r_max + 1, len(rows), len(cols)))
    acc = np.zeros((len(rows), len(cols)))
    for q in range(r_max):
        if q < k:
            acc = acc + np.outer(left[:, q], right[q])
        out[q + 1] = acc
    return out


def gabriel_cv(X, r_max, style=GabrielBlock(), measure=ScaleMeasure.MSE, engine=CLASSICAL):
    """Gabriel holdout CV over a grid of nr x nc blocks (singletons by default)."""
    X = _prepare(X, engine)
    n, p = X.shape
    if not (1 <= style.nr < n and 1 <= style.nc < p):
        raise ShapeError("block holdout must leave a non-empty complement")
    _check_rmax(r_max, min(n - style.nr, p - style.nc))
    diag = CvDiagnostics()
    errs = []
    if style.nr == 1 and style.nc == 1:
        errs = _gabriel_singletons(X, r_max, diag)
    else:
        for r0 in range(0, n, style.nr):
            rows = np.arange(r0, min(r0 + style.nr, n))
            for c0 in range(0, p, style.nc):
                cols = np.arange(c0, min(c0 + style.nc, p))
                pred = _block_predictions(X, rows, cols, r_max, diag)
                errs.append((X[np.ix_(rows, cols)][None] - pred).reshape(r_max + 1, -1).T)
        errs = np.vstack(errs)
    trace = CriterionTrace.from_values("gabriel", _aggregate_ranks(errs, measure), _alpha(engine))
    trace.diagnostics = diag
    return trace


def _gabriel_singletons(X, r_max, diag, chunk=256):
    n, p = X.shape
    cells = [(i, j) for i in range(n) for j in range(p)]
    ridx = np.array([[k for k in range(n) if k != i] for i in range(n)])
    cidx = np.array([[k for k in range(p) if k != j] for j in range(p)])
    out = np.zeros((len(cells), r_max + 1))
    for start in range(0, len(cells), chunk):
        block = np.array(cells[start : start + chunk])
        ii, jj = block[:, 0], block[:, 1]
        cores = X[ridx[ii][:, :, None], cidx[jj][:, None, :]]
        U, s, Vt = np.linalg.svd(cores, full_matrices=False)
        row_part = X[ii[:, None], cidx[jj]]  # X_{i, -j}
        col_part = X[ridx[ii], jj[:, None]]  # X_{-i, j}
        a = np.einsum("bq,bkq->bk", row_part, Vt[:, :r_max])
        b = np.einsum("bq,bqk->bk", col_part, U[:, :, :r_max])
        sv = s[:, :r_max]
        floor = np.maximum(PINV_FLOOR, REL_FLOOR * s[:, :1])
        keep = sv > floor
        diag.truncated += int(np.sum(~keep.all(axis=1)))
        terms = np.where(keep, a * b / np.where(keep, sv, 1.0), 0.0)
        pred = np.concatenate([np.zeros((len(block), 1)), np.cumsum(terms, axis=1)], axis=1)
        out[start : start + len(block)] = X[ii, jj][:, None] - pred
    return out


def bcv(X, r_max, style=Bcv(), measure=ScaleMeasure.MSE, engine=CLASSICAL):
    """Bi-cross-validation with seeded random nr x nc holdout blocks."""
    X = _prepare(X, engine)
    n, p = X.shape
    nr = style.nr if style.nr is not None else n // 2
    nc = style.nc if style.nc is not None else p // 2
    if style.n_holdouts < 1:
        raise ValueError("n_holdouts must be >= 1")
    if not (1 <= nr < n and 1 <= nc < p):
        raise NoValidHoldouts(f"holdout {nr}x{nc} leaves no complement in a {n}x{p} matrix")
    _check_rmax(r_max, min(n - nr, p - nc))
    rng = np.random.default_rng(style.seed)
    diag = CvDiagnostics()
    errs = []
    for _ in range(style.n_holdouts):
        rows = np.sort(rng.choice(n, size=nr, replace=False))
        cols = np.sort(rng.choice(p, size=nc, replace=False))
        pred = _block_predictions(X, rows, cols, r_max, diag)
        errs.append((X[np.ix_(rows, cols)][None] - pred).reshape(r_max + 1, -1).T)
    trace = CriterionTrace.from_values("bcv", _aggregate_ranks(np.vstack(errs), measure), _alpha(engine))
    trace.diagnostics = diag
    return trace


def ekk_predict(X, i0, j0, r, scaled=False, align="procrustes"):
    """Row/column deletion prediction of cell (i0, j0) from two independent SVDs."""
    X = as_matrix(X)
    n, p = X.shape
    if not 0 <= r <= min(n - 1, p - 1):
        raise RankOutOfRange(f"rank {r} outside [0, {min(n - 1, p - 1)}]")
    if r == 0:
        return 0.0
    Uc, sc, _ = np.linalg.svd(np.delete(X, j0, axis=1), full_matrices=False)
    Ur, sr, Vtr = np.linalg.svd(np.delete(X, i0, axis=0), full_matrices=False)
    return float(_ekk_cell(Uc, sc, Ur, sr, Vtr, i0, j0, n, p, r, scaled, align)[-1])


def _alignment(shared, Ur, r, align):
    # rotation (or sign flips) taking row-deleted coordinates to column-deleted ones
    M = shared[:, :r].T @ Ur[:, :r]
    if align == "sign":
        d = np.sign(np.diag(M))
        d[d == 0] = 1.0
        return np.diag(d)
    if align != "procrustes":
        raise ValueError(f"unknown alignment {align!r}")
    W, _, Zt = np.linalg.svd(M)
    return W @ Zt


def _ekk_cell(Uc, sc, Ur, sr, Vtr, i0, j0, n, p, r_max, scaled, align):
    """Predictions of cell (i0, j0) for ranks 1..r_max."""
    shared = np.delete(Uc[:, :r_max], i0, axis=0)
    lc, lr = sc[:r_max], sr[:r_max]
    if scaled:
        lc = lc * np.sqrt(p / (p - 1))
        lr = lr * np.sqrt(n / (n - 1))
    left = Uc[i0, :r_max] * np.sqrt(lc)
    right = np.sqrt(lr) * Vtr[:r_max, j0]
    out = np.empty(r_max)
    for r in range(1, r_max + 1):
        R = _alignment(shared, Ur, r, align)
        out[r - 1] = left[:r] @ R @ right[:r]
    return out


def ekk_cv(X, r_max, style=Ekk(), measure=ScaleMeasure.MSE, engine=CLASSICAL):
    """Eastment-Krzanowski CV over all cells (or a seeded subsample above the cap)."""
    X = _prepare(X, engine)
    n, p = X.shape
    _check_rmax(r_max, min(n - 1, p - 1))
    R = r_max
    Uc = np.empty((p, n, R))
    sc = np.empty((p, R))
    for j in range(p):
        U, s_, _ = np.linalg.svd(np.delete(X, j, axis=1), full_matrices=False)
        Uc[j], sc[j] = U[:, :R], s_[:R]
    # row-deleted left factors are padded with a zero at the deleted row
    Ur = np.zeros((n, n, R))
    sr = np.empty((n, R))
    Vr = np.empty((n, p, R))
    for i in range(n):
        U, s_, Vt = np.linalg.svd(np.delete(X, i, axis=0), full_matrices=False)
        Ur[i, np.arange(n) != i] = U[:, :R]
        sr[i], Vr[i] = s_[:R], Vt[:R].T
    cells = _sample_cells(n, p, style.cap, style.seed)
    ii, jj = cells[:, 0], cells[:, 1]
    lc, lr = sc[jj], sr[ii]
    if style.scaled:
        lc = lc * np.sqrt(p / (p - 1))
        lr = lr * np.sqrt(n / (n - 1))
    left = Uc[jj, ii] * np.sqrt(lc)
    right = np.sqrt(lr) * Vr[ii, jj]
    M = np.einsum("cnk,cnl->ckl", Uc[jj], Ur[ii])
    errs = np.zeros((len(cells), R + 1))
    xs = X[ii, jj]
    errs[:, 0] = xs
    for r in range(1, R + 1):
        Mr = M[:, :r, :r]
        if style.align == "sign":
            d = np.sign(np.einsum("ckk->ck", Mr))
            d[d == 0] = 1.0
            pred = np.sum(left[:, :r] * d * right[:, :r], axis=1)
        else:
            W, _, Zt = np.linalg.svd(Mr)
            pred = np.einsum("ck,ckl,cl->c", left[:, :r], W @ Zt, right[:, :r])
        errs[:, r] = xs - pred
    return CriterionTrace.from_values("ekk", _aggregate_ranks(errs, measure), _alpha(engine))


def wold_fixed_points_dense(X, cells, r_max, em_tol, em_max_iter, chunk=4096):
    """Reference EM fixed points by dense eigendecompositions (slow, kept for checking).

    The EM map x -> [P_r(X with cell := x)]_ij is iterated with secant
    acceleration; a flat map (every value is a fixed point) stops at the start
    value, as plain EM would. P_r is evaluated through the rank-2 update of
    the Gram matrix on the shorter side.
    """
    n, p = X.shape
    if p > n:
        X = X.T
        cells = cells[:, ::-1]
        n, p = p, n
    G0 = X.T @ X
    total = X.sum()
    tasks_i = np.repeat(cells[:, 0], r_max)
    tasks_j = np.repeat(cells[:, 1], r_max)
    tasks_r = np.tile(np.arange(1, r_max + 1), len(cells))
    out = np.empty(len(tasks_i))
    unconverged = 0
    eye = np.eye(p)
    for s in range(0, len(tasks_i), chunk):
        ii = tasks_i[s : s + chunk]
        jj = tasks_j[s : s + chunk]
        rr = tasks_r[s : s + chunk]
        xij = X[ii, jj]
        rows = X[ii]
        ej = eye[jj]
        top = np.arange(p)[None, :] >= (p - rr)[:, None]

        def g(x, idx):
            d = (x - xij[idx])[:, None, None]
            row = rows[idx]
            e = ej[idx]
            G = G0 + d * (row[:, :, None] * e[:, None, :] + e[:, :, None] * row[:, None, :])
            G = G + d * d * (e[:, :, None] * e[:, None, :])
            _, V = np.linalg.eigh(G)
            new_row = row + d[:, :, 0] * e
            coef = np.einsum("bq,bqk->bk", new_row, V) * top[idx]
            return np.einsum("bk,bk->b", coef, V[np.arange(len(idx)), jj[idx]])

        m = len(ii)
        x_prev = (total - xij) / (n * p - 1)
        idx = np.arange(m)
        g_prev = g(x_prev, idx)
        x_cur = g_prev.copy()
        result = x_cur.copy()
        active = np.abs(x_cur - x_prev) >= em_tol
        # sign bracket of g(x) - x; secant steps may not leave it, and before
        # a bracket exists they may not outrun the EM step by much
        h0 = g_prev - x_prev
        lo = np.where(h0 > 0, x_prev, -np.inf)
        hi = np.where(h0 < 0, x_prev, np.inf)
        for _ in range(em_max_iter - 1):
            if not active.any():
                break
            a = np.flatnonzero(active)
            g_cur = g(x_cur[a], a)
            h_cur = g_cur - x_cur[a]
            lo[a] = np.where(h_cur > 0, np.maximum(lo[a], x_cur[a]), lo[a])
            hi[a] = np.where(h_cur < 0, np.minimum(hi[a], x_cur[a]), hi[a])
            h_prev = g_prev[a] - x_prev[a]
            denom = h_cur - h_prev
            step_ok = np.abs(denom) > 1e-14 * np.maximum(1.0, np.abs(h_cur))
            x_sec = x_cur[a] - h_cur * (x_cur[a] - x_prev[a]) / np.where(step_ok, denom, 1.0)
            bracketed = np.isfinite(lo[a]) & np.isfinite(hi[a])
            move = x_sec - x_cur[a]
            tame = (move * h_cur >= 0) & (np.abs(move) <= 4 * np.abs(h_cur))
            step_ok &= np.where(bracketed, (lo[a] < x_sec) & (x_sec < hi[a]), tame)
            x_new = np.where(step_ok, x_sec, g_cur)
            x_prev[a] = x_cur[a]
            g_prev[a] = g_cur
            x_cur[a] = x_new
            result[a] = x_new
            done = np.abs(x_new - x_prev[a]) < em_tol
            active[a[done]] = False
        unconverged += int(active.sum())
        out[s : s + m] = result
    return out.reshape(len(cells), r_max), unconverged


def wold_fixed_points(X, cells, r_max, em_tol=1e-5, em_max_iter=50):
    """EM fixed point of the held-out value for each (cell, rank), ranks 1..r_max.

    Each cell starts at the mean of the other entries. Steps are Newton steps
    on g(x) = x, with g the rank-r reconstruction of the imputed cell; where g
    is not contracting the EM direction is followed with doubling steps until
    a sign change brackets the fixed point.
    """
    X = np.ascontiguousarray(X, dtype=float)
    cells = np.asarray(cells, dtype=np.int64)
    if X.shape[1] > X.shape[0]:
        X = np.ascontiguousarray(X.T)
        cells = np.ascontiguousarray(cells[:, ::-1])
    prep = _wold.prepare(X, cells[:, 0])
    out, unconverged = _wold.wold_kernel(X, *prep, cells, int(r_max), float(em_tol), int(em_max_iter))
    return out, int(unconverged)


def wold_cv(X, r_max, style=WoldSpeckled(), measure=ScaleMeasure.MSE, engine=CLASSICAL):
    """Wold speckled CV: each cell is imputed by rank-r EM with the cell held out."""
    X = _prepare(X, engine)
    n, p = X.shape
    _check_rmax(r_max, min(n, p))
    cells = _sample_cells(n, p, style.cap, style.seed)
    pred, unconverged = wold_fixed_points(X, cells, r_max, style.em_tol, style.em_max_iter)
    errs = X[cells[:, 0], cells[:, 1]][:, None] - pred
    if unconverged:
        warnings.warn(f"Wold EM did not converge for {unconverged} cell-rank pairs")
    trace = CriterionTrace.from_values(
        "wold", _aggregate_ranks(errs, measure), _alpha(engine), ranks=np.arange(1, r_max + 1)
    )
    trace.diagnostics = CvDiagnostics(em_unconverged=unconverged)
    return trace


def _alpha(engine):
    return 0.0 if engine is None or not engine.robust else float(engine.alpha)


def run_cv(method, X, r_max, measure=ScaleMeasure.MSE, engine=CLASSICAL, style=None):
    """Dispatch by name: wold, gabriel, ekk (or ekk_scaled), bcv."""
    method = method.lower()
    if method == "wold":
        return wold_cv(X, r_max, style or WoldSpeckled(), measure, engine)
    if method == "gabriel":
        return gabriel_cv(X, r_max, style or GabrielBlock(), measure, engine)
    if method in ("ekk", "ekk_scaled"):
        return ekk_cv(X, r_max, style or Ekk(scaled=method == "ekk_scaled"), measure, engine)
    if method == "bcv":
        return bcv(X, r_max, style or Bcv(), measure, engine)
    raise ValueError(f"unknown CV method {method!r}")


__all__ = [
    "Bcv",
    "CvDiagnostics",
    "Ekk",
    "Engine",
    "GabrielBlock",
    "ScaleMeasure",
    "WoldSpeckled",
    "aggregate",
    "bcv",
    "ekk_cv",
    "ekk_predict",
    "gabriel_cv",
    "gabriel_predict",
    "robust_proxy",
    "run_cv",
    "wold_cv",
]
