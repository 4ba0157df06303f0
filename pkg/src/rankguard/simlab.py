"""Low-rank + sparse + noise scenarios and the Monte Carlo benchmark runner."""

import csv
import io
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import criteria as crit
from . import crossval as cv
from .dpdfit import DpdParams, fit_sequential

DELTAS = (0.0, 0.05, 0.1, 0.2)
NOISE_RATIOS = (0.05, 0.5, 1.0)
PROFILES = ("equal", "decreasing")


@dataclass(frozen=True)
class Scenario:
    n: int = 50
    p: int = 40
    r: int = 10
    profile: str = "equal"
    sigma_e2: float = 0.05
    delta: float = 0.0
    seed: int = 0
    label: str = ""

    def __post_init__(self):
        if not 0 <= self.r <= min(self.n, self.p):
            raise ValueError("true rank must lie in [0, min(n, p)]")
        if self.sigma_e2 < 0:
            raise ValueError("sigma_e2 must be non-negative")
        if not 0 <= self.delta < 1:
            raise ValueError("delta must lie in [0, 1)")
        if self.profile not in PROFILES:
            raise ValueError(f"profile must be one of {PROFILES}")

    @property
    def name(self):
        base = self.label or f"d{self.delta:g}-s{self.sigma_e2:g}"
        return f"{base}-{self.profile}"


@dataclass
class GeneratedInstance:
    X: np.ndarray
    L: np.ndarray
    S: np.ndarray
    noise: np.ndarray
    true_rank: int


def singular_profile(scenario):
    d = np.zeros(min(scenario.n, scenario.p))
    if scenario.r:
        d[: scenario.r] = 1.0 if scenario.profile == "equal" else np.linspace(2.0, 1.0, scenario.r)
    return d


def generate(scenario: Scenario, rep=None) -> GeneratedInstance:
    """Draw one instance. ``rep`` selects an independent replication stream."""
    key = [scenario.seed] if rep is None else [scenario.seed, rep]
    # one child stream per role: basis, noise, contamination mask, contamination sign
    basis_rng, noise_rng, mask_rng, sign_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(key).spawn(4)
    )
    n, p = scenario.n, scenario.p
    A = basis_rng.standard_normal((n, p))
    U, _, Vt = np.linalg.svd(A, full_matrices=False)
    L = (U * singular_profile(scenario)) @ Vt
    sd = np.sqrt(scenario.sigma_e2 * np.sum(L * L) / (n * p))
    noise = sd * noise_rng.standard_normal((n, p))
    hit = mask_rng.random((n, p)) < scenario.delta
    sign = 2.0 * (sign_rng.random((n, p)) < 0.5) - 1.0
    S = 5.0 * hit * sign * np.abs(L).max()
    return GeneratedInstance(L + S + noise, L, S, noise, scenario.r)


def scenario_grid(n=50, p=40, r=10, seed=0):
    """The 12 contamination x noise cells for each singular-value profile."""
    out = []
    for profile in PROFILES:
        for i, delta in enumerate(DELTAS):
            for j, s2 in enumerate(NOISE_RATIOS):
                out.append(Scenario(n, p, r, profile, s2, delta, seed, f"S{i}{j + 1}"))
    return out


def find_scenario(label, profile="equal", **kw):
    for s in scenario_grid(**kw):
        if s.label == label.upper() and s.profile == profile:
            return s
    raise KeyError(f"no scenario {label!r} with profile {profile!r}")


@dataclass(frozen=True)
class Method:
    """A rank estimator: criterion or CV name, robust alpha (None = classical), CV scale measure."""

    name: str
    alpha: float = None
    measure: str = "mse"

    @classmethod
    def parse(cls, spec):
        """``name[:measure][@alpha]``, e.g. ``pc3``, ``bcv:mad``, ``dicmr@0.25``, ``wold@0.3``."""
        spec = spec.strip().lower()
        alpha = None
        if "@" in spec:
            spec, a = spec.split("@", 1)
            alpha = float(a)
        measure = "mse"
        if ":" in spec:
            spec, measure = spec.split(":", 1)
        if spec == "dicmr" and alpha is None:
            alpha = crit.DEFAULT_ALPHA
        return cls(spec, alpha, measure)

    @property
    def label(self):
        s = self.name
        if self.measure != "mse":
            s += f":{self.measure}"
        if self.alpha is not None:
            s += f"@{self.alpha:g}"
        return s


CV_NAMES = ("wold", "gabriel", "ekk", "ekk_scaled", "bcv")
KIND_NAMES = tuple(k.value for k in crit.CriterionKind)


class _FitCache:
    def __init__(self, X, r_max):
        self.X = X
        self.r_max = r_max
        self.fits = {}
        self.proxies = {}

    def fit(self, alpha):
        if alpha not in self.fits:
            self.fits[alpha] = fit_sequential(self.X, DpdParams(alpha=alpha), self.r_max)
        return self.fits[alpha]

    def proxy(self, alpha):
        if alpha not in self.proxies:
            self.proxies[alpha] = cv.robust_proxy(self.X, alpha)
        return self.proxies[alpha]

    def max_ascent(self):
        return max([f.max_ascent() for f in self.fits.values()], default=0.0)


def estimate_rank(method: Method, X, r_max, cache=None, seed=0):
    cache = cache or _FitCache(X, r_max)
    name = method.name
    if name == "dicmr":
        return crit.dicmr_trace(X, method.alpha, r_max, cache.fit(method.alpha)).selected
    if name in KIND_NAMES:
        engine = crit.Engine(method.alpha)
        fit = cache.fit(method.alpha) if engine.robust else None
        return crit.classical_trace(name, X, r_max, engine, fit).selected
    if name in CV_NAMES:
        data = X if method.alpha is None else cache.proxy(method.alpha)
        style = cv.Bcv(seed=seed) if name == "bcv" else None
        return cv.run_cv(name, data, r_max, cv.ScaleMeasure(method.measure), crit.CLASSICAL, style).selected
    if name == "elbow":
        if method.alpha is None:
            values = np.linalg.svd(X, compute_uv=False)
        else:
            values = cache.fit(method.alpha).triplets.values
        return crit.elbow(values[: r_max + 2])
    if name == "oracle":
        raise ValueError("oracle needs the true rank; handled by the runner")
    raise ValueError(f"unknown method {name!r}")


@dataclass
class MethodResult:
    scenario: str
    method: str
    estimates: list
    true_rank: int
    failures: int = 0
    seconds: float = 0.0
    max_ascent: float = 0.0

    def _err(self):
        return np.array(self.estimates, dtype=float) - self.true_rank

    @property
    def reps(self):
        return len(self.estimates)

    @property
    def prop_exact(self):
        return float(np.mean(self._err() == 0)) if self.reps else float("nan")

    @property
    def prop_over(self):
        return float(np.mean(self._err() > 0)) if self.reps else float("nan")

    @property
    def bias(self):
        return float(np.mean(self._err())) if self.reps else float("nan")

    @property
    def rmse(self):
        return float(np.sqrt(np.mean(self._err() ** 2))) if self.reps else float("nan")


@dataclass
class BenchReport:
    results: list = field(default_factory=list)

    def get(self, scenario, method):
        for res in self.results:
            if res.scenario == scenario and res.method == method:
                return res
        raise KeyError((scenario, method))

    def to_csv(self):
        """Scores per (scenario, method). Timings are left out so equal seeds give equal bytes."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scenario", "method", "reps", "failures", "prop_exact", "prop_over", "bias", "rmse"])
        for r in self.results:
            w.writerow(
                [r.scenario, r.method, r.reps, r.failures, f"{r.prop_exact:.4f}", f"{r.prop_over:.4f}",
                 f"{r.bias:.4f}", f"{r.rmse:.4f}"]
            )
        return buf.getvalue()

    def to_text(self):
        scen = list(dict.fromkeys(r.scenario for r in self.results))
        meth = list(dict.fromkeys(r.method for r in self.results))
        width = max(12, *(len(m) for m in meth)) + 2
        lines = []
        for title, fmt in (
            ("prop (over)", lambda r: f"{r.prop_exact:.2f} ({r.prop_over:.2f})"),
            ("bias (rmse)", lambda r: f"{r.bias:5.2f} ({r.rmse:.2f})"),
        ):
            lines.append(title)
            lines.append("".ljust(width) + "".join(s.rjust(22) for s in scen))
            for m in meth:
                cells = [fmt(self.get(s, m)).rjust(22) for s in scen]
                lines.append(m.ljust(width) + "".join(cells))
            lines.append("")
        return "\n".join(lines)


def _run_replication(args):
    scenario, methods, rep, r_max = args
    inst = generate(scenario, rep)
    cache = _FitCache(inst.X, r_max)
    out = []
    for m in methods:
        t0 = time.perf_counter()
        try:
            if m.name == "oracle":
                est = inst.true_rank
            else:
                with warnings.catch_warnings():
                    # EM non-convergence and similar notices are expected in bulk runs
                    warnings.simplefilter("ignore")
                    est = estimate_rank(m, inst.X, r_max, cache, seed=rep)
        except Exception:  # failures are counted, never fatal
            est = None
        out.append((est, time.perf_counter() - t0))
    return out, cache.max_ascent()


def run_bench(scenarios, methods, reps, threads=1, r_max=None) -> BenchReport:
    """Replicate every scenario ``reps`` times and score each method's rank estimates.

    Replication k of a scenario always uses the stream (seed, k), so results
    do not depend on ``threads``.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    methods = [m if isinstance(m, Method) else Method.parse(m) for m in methods]
    report = BenchReport()
    for sc in scenarios:
        rm = r_max if r_max is not None else min(sc.n, sc.p) // 2
        jobs = [(sc, methods, k, rm) for k in range(reps)]
        if threads > 1:
            with ProcessPoolExecutor(max_workers=threads) as ex:
                outs = list(ex.map(_run_replication, jobs))
        else:
            outs = [_run_replication(j) for j in jobs]
        for mi, m in enumerate(methods):
            res = MethodResult(sc.name, m.label, [], sc.r)
            for per_method, ascent in outs:
                est, secs = per_method[mi]
                res.seconds += secs
                res.max_ascent = max(res.max_ascent, ascent)
                if est is None:
                    res.failures += 1
                else:
                    res.estimates.append(int(est))
            report.results.append(res)
    return report
