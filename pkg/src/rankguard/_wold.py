"""Compiled kernel for the Wold speckled EM fixed points.

For a held-out cell (i, j) the imputed matrix differs from X only in row i,
so its Gram matrix is G_i + y y^T with G_i the Gram matrix of X without row
i and y the imputed row. In the eigenbasis of G_i this is a diagonal plus
rank-one matrix, whose eigenvalues solve the secular equation
1 = sum_l z_l^2 / (mu - d_l), with z the coordinates of y. Entry (i, j) of
the rank-r reconstruction is then

    sum over the top r roots mu of  (sum_l beta_l z_l / (mu - d_l)) / (sum_l z_l^2 / (mu - d_l)^2)

where beta is row j of the eigenvector matrix. One EM step costs O(r p)
per root instead of a dense eigendecomposition.
"""

import numpy as np
from numba import njit

EPS = np.finfo(float).eps
# a search leaving x0 +- RUNAWAY * max|X| has no fixed point to find
RUNAWAY = 1e6


@njit(cache=True, error_model="numpy")
def _groups(d, rel):
    # start indices of runs of equal eigenvalues (d sorted descending)
    p = d.shape[0]
    tol = rel * max(abs(d[0]), 1e-300)
    starts = np.empty(p + 1, dtype=np.int64)
    g = 0
    starts[0] = 0
    for l in range(1, p):
        if d[starts[g]] - d[l] > tol:
            g += 1
            starts[g] = l
    starts[g + 1] = p
    return starts[: g + 2]


@njit(cache=True, error_model="numpy")
def _phi(tau, a, w, m, origin):
    # secular function 1 - sum w / (mu - a) at mu = origin + tau, and its derivative
    s = 0.0
    ds = 0.0
    for g in range(m):
        t = tau - (a[g] - origin)
        s += w[g] / t
        ds += w[g] / (t * t)
    return 1.0 - s, ds


@njit(cache=True, error_model="numpy")
def _root(a, w, m, k, guess):
    """Root of 1 = sum w / (mu - a) above a[k] (and below a[k-1] for k > 0).

    Returns (root, origin) with origin the pole used to shift the variable.
    """
    left = a[k]
    if k == 0:
        width = 0.0
        for g in range(m):
            width += w[g]
    else:
        width = a[k - 1] - left
    # take the nearer pole as origin so differences near the root stay accurate
    origin = left
    lo, hi = 0.0, width
    if k > 0:
        f, _ = _phi(0.5 * width, a, w, m, left)
        if f < 0:
            origin = a[k - 1]
            lo, hi = -width, 0.0
    tau = guess - origin
    if not lo < tau < hi:
        tau = 0.5 * (lo + hi)
    for _ in range(200):
        f, df = _phi(tau, a, w, m, origin)
        if f > 0:
            hi = tau
        elif f < 0:
            lo = tau
        else:
            break
        # Newton on tau * phi(tau), which is nearly linear next to the origin pole
        dF = f + tau * df
        nxt = tau - tau * f / dF if dF != 0 else 0.5 * (lo + hi)
        if not lo < nxt < hi:
            nxt = 0.5 * (lo + hi)
        step = abs(nxt - tau)
        tau = nxt
        if step <= 4 * EPS * max(abs(tau), EPS * width) or hi - lo <= 4 * EPS * max(abs(lo), abs(hi)):
            break
    return origin + tau, origin


@njit(cache=True, error_model="numpy")
def _evaluate(d, starts, z, beta, r, guesses, roots, cum, dcum, ws, cnt):
    """Entry (i, j) of the rank-r reconstruction for the imputed row with coordinates z.

    Returns (value, derivative along the held-out cell). ``cum[k]`` and
    ``dcum[k]`` receive the rank-(k+1) value and derivative for every k < r,
    ``roots`` the top eigenvalues.
    ``ws`` (5 x p) and ``cnt`` (p) are scratch space.
    """
    G = starts.shape[0] - 1
    a = ws[0]
    w = ws[1]
    c = ws[2]
    extra_val = ws[3]
    bb = ws[4]
    total = 0.0
    for l in range(z.shape[0]):
        total += z[l] * z[l]
    thr = 1e-26 * (abs(d[0]) + total)
    m = 0
    for g in range(G):
        W = 0.0
        C = 0.0
        B = 0.0
        for l in range(starts[g], starts[g + 1]):
            W += z[l] * z[l]
            C += beta[l] * z[l]
            B += beta[l] * beta[l]
        mult = starts[g + 1] - starts[g]
        extra_val[g] = d[starts[g]]
        if W > thr:
            a[m] = d[starts[g]]
            w[m] = W
            c[m] = C
            bb[m] = B
            m += 1
            cnt[g] = mult - 1
        else:
            cnt[g] = mult
    out = 0.0
    dout = 0.0
    count = 0
    k = 0
    eg = 0
    have_root = False
    mu = 0.0
    origin = 0.0
    while count < r:
        while eg < G and cnt[eg] == 0:
            eg += 1
        if k < m and not have_root:
            mu, origin = _root(a, w, m, k, guesses[count])
            have_root = True
        if have_root and (eg >= G or mu >= extra_val[eg]):
            num = 0.0
            den = 0.0
            sb = 0.0
            sc2 = 0.0
            sw3 = 0.0
            tau = mu - origin
            for g in range(m):
                t = tau - (a[g] - origin)
                num += c[g] / t
                den += w[g] / (t * t)
                sb += bb[g] / t
                sc2 += c[g] / (t * t)
                sw3 += w[g] / (t * t * t)
            out += num / den
            # the root moves by 2 num / den per unit change of the cell
            dmu = 2.0 * num / den
            dnum = sb - dmu * sc2
            dden = 2.0 * sc2 - 2.0 * dmu * sw3
            dout += (dnum * den - num * dden) / (den * den)
            roots[count] = mu
            have_root = False
            k += 1
        elif eg < G:
            # eigenvalue left unchanged by the update; its vector is orthogonal to the row
            roots[count] = extra_val[eg]
            cnt[eg] -= 1
        else:
            break
        cum[count] = out
        dcum[count] = dout
        count += 1
    return out, dout


@njit(cache=True, error_model="numpy")
def wold_kernel(X, d_all, V_all, starts_all, nstarts, cells, r_max, tol, max_iter):
    """EM fixed points for every (cell, rank); returns (values, unconverged count)."""
    n, p = X.shape
    total = 0.0
    top = 0.0
    for i in range(n):
        for j in range(p):
            total += X[i, j]
            top = max(top, abs(X[i, j]))
    window = RUNAWAY * max(top, 1e-300)
    nc = cells.shape[0]
    out = np.empty((nc, r_max))
    unconverged = 0
    z0 = np.empty(p)
    z = np.empty(p)
    beta = np.empty(p)
    shared = np.empty(r_max)
    nan_guess = np.full(r_max, np.nan)
    roots = np.empty(r_max)
    work = np.empty(r_max)
    cum = np.empty(r_max)
    dcum = np.empty(r_max)
    dshared = np.empty(r_max)
    ws = np.empty((5, p))
    cnt = np.empty(p, dtype=np.int64)
    for q in range(nc):
        i = cells[q, 0]
        j = cells[q, 1]
        d = d_all[i]
        V = V_all[i]
        starts = starts_all[i, : nstarts[i]]
        xij = X[i, j]
        for l in range(p):
            acc = 0.0
            for t in range(p):
                acc += V[t, l] * X[i, t]
            z0[l] = acc
            beta[l] = V[j, l]
        x0 = (total - xij) / (n * p - 1)
        for l in range(p):
            z[l] = z0[l] + (x0 - xij) * beta[l]
        # the start value is shared by all ranks: one pass gives every g_r(x0)
        _evaluate(d, starts, z, beta, r_max, nan_guess, roots, shared, dshared, ws, cnt)
        start_roots = roots.copy()
        for r in range(1, r_max + 1):
            x_cur = x0
            g_cur = shared[r - 1]
            slope = dshared[r - 1]
            guesses = start_roots.copy()
            # bracket of the root of g(x) - x once both signs have been seen
            lo = -np.inf
            hi = np.inf
            reach = 1.0
            done = False
            it = 0
            while True:
                F = g_cur - x_cur
                noise = 64.0 * EPS * (abs(x_cur) + top)
                if abs(F) <= noise:
                    # numerically a root; EM only settles on stable ones
                    done = slope < 1.0 - 1e-3 and abs(x_cur - x0) <= window
                    break
                if F > 0:
                    lo = max(lo, x_cur)
                else:
                    hi = min(hi, x_cur)
                bracketed = np.isfinite(lo) and np.isfinite(hi)
                gain = 1.0 / (1.0 - slope) if slope < 1.0 - 1e-6 else np.inf
                if bracketed:
                    # Newton inside the bracket, bisection otherwise
                    x_new = x_cur + F * gain if np.isfinite(gain) else 0.5 * (lo + hi)
                    if not lo < x_new < hi:
                        x_new = 0.5 * (lo + hi)
                else:
                    # follow the EM direction, at most ``reach`` EM steps at a
                    # time, so the first sign change along the EM path is kept
                    x_new = x_cur + F * min(gain, reach)
                    reach *= 2.0
                done = abs(x_new - x_cur) < tol or hi - lo < tol
                x_cur = x_new
                it += 1
                if done or it >= max_iter or abs(x_cur - x0) > window:
                    break
                for l in range(p):
                    z[l] = z0[l] + (x_cur - xij) * beta[l]
                g_cur, slope = _evaluate(d, starts, z, beta, r, guesses, work, cum, dcum, ws, cnt)
                for t in range(r):
                    guesses[t] = work[t]
            result = x_cur
            if not done:
                # no fixed point found: report the plain EM iterate instead
                unconverged += 1
                x_cur = x0
                for t in range(r):
                    guesses[t] = start_roots[t]
                g_cur = shared[r - 1]
                for _ in range(max_iter):
                    x_new = g_cur
                    step = abs(x_new - x_cur)
                    x_cur = x_new
                    if step < tol:
                        break
                    for l in range(p):
                        z[l] = z0[l] + (x_cur - xij) * beta[l]
                    g_cur, slope = _evaluate(d, starts, z, beta, r, guesses, work, cum, dcum, ws, cnt)
                    for t in range(r):
                        guesses[t] = work[t]
                result = x_cur
            out[q, r - 1] = result
    return out, unconverged


def prepare(X, rows, merge_rel=1e-12):
    """Eigendecompositions of the leave-one-row-out Gram matrices (descending)."""
    n, p = X.shape
    d_all = np.zeros((n, p))
    V_all = np.zeros((n, p, p))
    starts_all = np.zeros((n, p + 1), dtype=np.int64)
    nstarts = np.zeros(n, dtype=np.int64)
    for i in np.unique(rows):
        Xi = np.delete(X, i, axis=0)
        vals, vecs = np.linalg.eigh(Xi.T @ Xi)
        d_all[i] = vals[::-1]
        V_all[i] = vecs[:, ::-1]
        s = _groups(d_all[i], merge_rel)
        starts_all[i, : len(s)] = s
        nstarts[i] = len(s)
    return d_all, V_all, starts_all, nstarts
