"""Acceptance criteria, one test each. Every test prints a single PASS/FAIL line.

Criteria 1-4 are 100-replication Monte Carlo runs (several minutes each);
criterion 12 needs the pan-cancer download and only runs under ``-m pancan``.
"""

import warnings

import numpy as np
import pytest

from rankguard import criteria as crit
from rankguard import impute as imp
from rankguard import simlab as sl
from rankguard import theory
from rankguard.dpdfit import DpdParams, fit_rank_one, fit_sequential
from rankguard.matcore import BlockPartition

REPS = 100
_bench = {}


@pytest.fixture
def verdict(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return emit


def bench(label, profile, methods):
    key = (label, profile, tuple(methods))
    if key not in _bench:
        sc = sl.find_scenario(label, profile)
        _bench[key] = sl.run_bench([sc], methods, REPS, threads=1)
    return _bench[key]


@pytest.mark.slow
def test_criterion_01_clean_classical_recovery(verdict):
    rep = bench("S01", "equal", ["pc3", "ic3", "wold"])
    props = {r.method: r.prop_exact for r in rep.results}
    verdict(1, all(v >= 0.95 for v in props.values()), f"S01 equal prop_exact {props} (need >= 0.95)")


@pytest.mark.slow
def test_criterion_02_nonrobust_cv_failure(verdict):
    rep = bench("S11", "equal", ["wold", "ekk", "gabriel", "bcv"])
    props = {r.method: r.prop_exact for r in rep.results}
    verdict(2, all(v <= 0.10 for v in props.values()), f"S11 equal prop_exact {props} (need <= 0.10)")


@pytest.mark.slow
def test_criterion_03_dicmr_robustness(verdict):
    res = bench("S21", "decreasing", ["dicmr"]).results[0]
    verdict(3, res.prop_exact >= 0.80, f"S21 decreasing DICMR prop_exact {res.prop_exact:.2f} (need >= 0.80)")


@pytest.mark.slow
def test_criterion_04_dicmr_mid_noise(verdict):
    res = bench("S02", "equal", ["dicmr"]).results[0]
    ok = 0.35 <= res.prop_exact <= 0.70 and 0.8 <= res.rmse <= 2.0
    verdict(4, ok, f"S02 equal DICMR prop_exact {res.prop_exact:.2f} in [0.35, 0.70], rmse {res.rmse:.2f} in [0.8, 2.0]")


def test_criterion_05_bound_exactness(verdict):
    p0 = theory.overestimation_bound(0.0, 1.0)
    alphas = [0.0, 0.25, 0.5, 0.75, 1.0]
    rows = theory.bound_curve(alphas, (-3.0, 3.0), 61)
    table = {(round(lr, 9), a): pr for lr, a, pr in rows}
    grid = sorted({lr for lr, _ in table})
    even = max(abs(table[(lr, a)] - table[(round(-lr, 9) + 0.0, a)]) for lr in grid for a in alphas)
    ordered = all(
        table[(lr, lo)] >= table[(lr, hi)] - 1e-12 for lr in grid for lo, hi in zip(alphas, alphas[1:])
    )
    ok = abs(p0 - 0.75) <= 4 * np.finfo(float).eps and even <= 1e-12 and ordered
    verdict(5, ok, f"bound(0, c=1) = {p0!r}, max asymmetry {even:.1e}, alpha ordering {ordered}")


def test_criterion_06_gaussian_constants(verdict):
    worst = 0.0
    for a in np.linspace(0.0, 1.0, 11):
        quad = theory.constants_quadrature(a)
        closed = theory.constants_gaussian(a)
        for name in ("a_alpha", "b_alpha", "c_alpha", "norm_f"):
            worst = max(worst, abs(getattr(quad, name) - getattr(closed, name)))
    verdict(6, worst <= 1e-8, f"max |closed form - quadrature| over 11 alphas = {worst:.1e} (need <= 1e-8)")


def test_criterion_07_small_alpha_equivalence(verdict):
    a = 1e-6
    lam_err = h_err = 0.0
    for seed in range(20):
        X = np.random.default_rng(seed).standard_normal((20, 15))
        s1 = np.linalg.svd(X, compute_uv=False)[0]
        lam_err = max(lam_err, abs(fit_rank_one(X, DpdParams(alpha=a)).lam - s1) / s1)
        fit = fit_sequential(X, DpdParams(alpha=a), 2)
        for r in range(3):
            R = X - fit.triplets.reconstruct(r)
            gauss = np.mean(R * R) / (2 * fit.sigma[r] ** 2)
            h_err = max(h_err, abs(crit.dicmr_h_excess(X, fit, r) - gauss))
    ok = lam_err <= 1e-3 and h_err <= 1e-4
    verdict(7, ok, f"max relative lambda error {lam_err:.1e} (<= 1e-3), max H-term gap {h_err:.1e} (<= 1e-4)")


def _grid_minimum(X, a, steps=50, sigmas=300):
    """Brute-force minimum of the objective over a lambda x angle x angle grid, sigma profiled out."""
    U, s, Vt = np.linalg.svd(X)
    th = np.linspace(0, 2 * np.pi, steps, endpoint=False)
    ph = np.linspace(0, np.pi, steps, endpoint=False)
    lam = np.linspace(0, 1.5 * s[0], steps)
    us = np.cos(th)[:, None] * U[:, 0] + np.sin(th)[:, None] * U[:, 1]
    vs = np.cos(ph)[:, None] * Vt[0] + np.sin(ph)[:, None] * Vt[1]
    M = lam[:, None, None, None, None] * us[None, :, None, :, None] * vs[None, None, :, None, :]
    r2 = ((X - M).reshape(-1, X.size)) ** 2
    k = (2 * np.pi) ** (-a / 2)
    best = np.inf
    for sg in np.exp(np.linspace(np.log(1e-3), np.log(10.0), sigmas)):
        m = np.mean(np.exp(-a * r2 / (2 * sg * sg)), axis=1)
        best = min(best, float(np.min(sg ** (-a) * k * ((1 + a) ** -0.5 - (1 + 1 / a) * m))))
    return best


def test_criterion_08_grid_oracle(verdict):
    a, slack = 0.5, 1e-3
    gaps = []
    for seed in range(10):
        X = np.random.default_rng(seed).standard_normal((3, 3))
        gaps.append(fit_rank_one(X, DpdParams(alpha=a)).objective - _grid_minimum(X, a))
    worst = max(gaps)
    verdict(8, worst <= slack, f"max (fit - grid minimum) over 10 matrices = {worst:.2e} (need <= {slack:g})")


@pytest.mark.slow
def test_criterion_09_descent(verdict):
    reports = [
        bench("S01", "equal", ["pc3", "ic3", "wold"]),
        bench("S11", "equal", ["wold", "ekk", "gabriel", "bcv"]),
        bench("S21", "decreasing", ["dicmr"]),
        bench("S02", "equal", ["dicmr"]),
    ]
    worst = max(r.max_ascent for rep in reports for r in rep.results)
    verdict(9, worst <= 1e-12, f"largest objective increase over all fits of criteria 1-4 = {worst:.1e}")


def test_criterion_10_exact_completion(verdict):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        r = 1 + seed % 3
        n, p = int(rng.integers(20, 41)), int(rng.integers(15, 31))
        U, V = rng.standard_normal((n, r)), rng.standard_normal((p, r))
        X = U @ V.T
        m, q = int(rng.integers(r + 1, n // 3)), int(rng.integers(r + 1, p // 3))
        part = BlockPartition(tuple(range(n - m)), tuple(range(p - q)))
        cfg = imp.ImputeConfig(part, alpha=0.0, rank=r, normalize=False)
        worst = max(worst, imp.block_impute(X, cfg, X[n - m :, p - q :]).relative_rmse)
    verdict(10, worst < 1e-6, f"max relative RMSE over 20 cases = {worst:.1e} (need < 1e-6)")


def test_criterion_11_robust_imputation(verdict):
    part = BlockPartition(tuple(range(80)), tuple(range(64)))
    ratios = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for seed in range(10):
            inst = sl.generate(sl.Scenario(100, 80, 5, "equal", 0.05, 0.05, seed=seed))
            truth = inst.L[80:, 64:]
            robust = imp.block_impute(inst.X, imp.ImputeConfig(part, 0.75, 5, True), truth).relative_rmse
            classical = imp.block_impute(inst.X, imp.ImputeConfig(part, 1e-3, 5, True), truth).relative_rmse
            ratios.append(robust / classical)
    worst = max(ratios)
    verdict(11, worst <= 0.5, f"robust / classical relative RMSE, worst of 10 seeds = {worst:.3f} (need <= 0.5)")


@pytest.mark.pancan
def test_criterion_12_pancan(verdict, request, capsys):
    if "pancan" not in (request.config.getoption("markexpr") or ""):
        with capsys.disabled():
            print("\ncriterion 12: SKIP  hours-scale PANCAN run; select it with -m pancan")
        pytest.skip("PANCAN reproduction runs only under -m pancan")
    data = imp.pancan_ingest()
    assert data.X.shape == (801, 20531)
    part = BlockPartition(tuple(range(100)), tuple(range(2000)))
    Rc, Cc = part.complement(data.X.shape)
    truth = data.X[np.ix_(Rc, Cc)]
    res = imp.block_impute(data.X, imp.ImputeConfig(part, alpha=0.875, rank="dicmr", normalize=True), truth)
    ok = res.relative_rmse <= 0.05 and 3 <= res.selected_rank <= 8
    verdict(12, ok, f"PANCAN relative RMSE {res.relative_rmse:.4f} (<= 0.05), rank {res.selected_rank} in [3, 8]")
