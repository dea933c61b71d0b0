"""Verification suites: named invariant checks with measured values and tolerances."""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import ndtr

from .bounds import (
    annealed_critical_h,
    critical_curve_d3,
    estimate_constants,
    lower_bound_d2,
    lower_bound_d3,
    region_positive_d2,
    region_positive_d3,
)
from .gaussfield import GaussianModel, build_model, log_partition
from .lattice import BoxSpec, homogeneous_environment
from .pinning import (
    disorder_average,
    estimate_annealed,
    estimate_quenched_IS,
    estimate_quenched_TI,
    make_model,
    oracle_Z_ratio_detail,
    sample_environment,
)
from .walk import WalkKernel, green_restricted_rows, massive_variance_bound, stirling_check

logger = logging.getLogger(__name__)

SINGLE_SITE_EXACT = float(np.log1p(np.expm1(0.5) * (ndtr(1.0) - ndtr(-1.0))))


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: dict = field(default_factory=dict)
    tolerance: dict = field(default_factory=dict)
    runtime: float = 0.0
    note: str = ""

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name} ({self.runtime:.1f}s) {self.note}"

    def as_dict(self) -> dict:
        return asdict(self)


def _timed(fn):
    def wrapper(*args, **kw):
        t0 = time.perf_counter()
        res = fn(*args, **kw)
        res.runtime = time.perf_counter() - t0
        return res

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_timed
def check_walk_matrix(dims=(2, 3), sizes=(2, 4, 8), masses=(0.0, 0.1, 0.5), tol=1e-10) -> CheckResult:
    """Restricted Green diagonal equals the precision-inverse diagonal."""
    worst = {}
    for d in dims:
        for n in sizes:
            box = BoxSpec(d, n)
            for m in masses:
                cov = build_model(box, m).covariance()
                G = green_restricted_rows(WalkKernel.from_mass(d, m, box), np.arange(box.num_sites))
                worst[f"d={d},n={n},m={m}"] = float(np.max(np.abs(np.diag(G.values) - np.diag(cov))))
    err = max(worst.values())
    return CheckResult("walk-matrix duality", err <= tol, {"max_abs_error": err, "cases": worst},
                       {"abs": tol}, note=f"max |G - Q^-1| = {err:.2e}")


@_timed
def check_single_site(N=100_000, seed=2024) -> CheckResult:
    """IS and TI on one site with v=0.5, a=1 against the closed form."""
    box = BoxSpec(2, 1)
    model = make_model(homogeneous_environment(box, 0.5), 1.0)
    is_est = estimate_quenched_IS(model, N, seed)
    ti_est = estimate_quenched_TI(model, seed=seed)
    res = {}
    ok = True
    for est in (is_est, ti_est):
        z = abs(est.value - SINGLE_SITE_EXACT) / est.stderr
        res[est.estimator] = {"value": est.value, "stderr": est.stderr, "z": z}
        ok &= z <= 3 and est.stderr < 0.005
    return CheckResult("single-site closed form", ok, {"exact": SINGLE_SITE_EXACT, **res},
                       {"z": 3, "stderr": 0.005},
                       note=f"exact {SINGLE_SITE_EXACT:.5f}, IS z={res['IS']['z']:.2f}, TI z={res['TI']['z']:.2f}")


ORACLE_BOXES = ((2, 1), (2, 2), (2, 3), (3, 1), (3, 2))
ORACLE_GRID = [(b, h) for b in (0.0, 0.5, 1.0) for h in (-0.3, 0.0, 0.3)]


@_timed
def check_oracle(boxes=ORACLE_BOXES, grid=ORACLE_GRID, a=1.0, N=50_000, seed=7, env_seed=11) -> CheckResult:
    """IS and TI against the inclusion-exclusion oracle on small boxes."""
    cases = []
    ok = True
    for d, n in boxes:
        box = BoxSpec(d, n)
        for i, (b, h) in enumerate(grid):
            env = sample_environment(box, b, h, env_seed + i)
            model = make_model(env, a)
            z_ratio, q_err = oracle_Z_ratio_detail(model)
            exact = float(np.log(z_ratio) / box.num_sites)
            row = {"d": d, "n": n, "b": b, "h": h, "oracle": exact}
            for est in (estimate_quenched_IS(model, N, seed + i), estimate_quenched_TI(model, seed=seed + i)):
                se = est.stderr
                dev = abs(est.value - exact)
                passed = dev <= 3 * se if se > 0 else dev <= 1e-12
                row[est.estimator] = {"value": est.value, "stderr": se, "pass": bool(passed)}
                ok &= bool(passed)
            cases.append(row)
    fails = sum(1 for c in cases for k in ("IS", "TI") if not c[k]["pass"])
    return CheckResult("oracle equivalence", ok, {"cases": cases}, {"z": 3},
                       note=f"{len(cases)} points x 2 estimators, {fails} outside 3 stderr")


CRIT4_B = 1.0
CRIT4_SIZES = (4, 8, 16)


@_timed
def check_annealed_criticality(a=1.0, seed=31) -> CheckResult:
    hc = annealed_critical_h(CRIT4_B)
    above = estimate_annealed(BoxSpec(2, 16), CRIT4_B, hc + 0.2, a, seed=seed, method="auto")
    below = [estimate_annealed(BoxSpec(2, n), CRIT4_B, hc - 0.2, a, seed=seed + n, method="auto")
             for n in CRIT4_SIZES]
    above_ok = above.value >= 3 * above.stderr
    dist = [abs(e.value) for e in below]
    trend_ok = all(dist[i + 1] < dist[i] for i in range(len(dist) - 1))
    hc_ok = abs(hc + 0.433781) < 1e-6
    return CheckResult(
        "annealed criticality", bool(above_ok and trend_ok and hc_ok),
        {"h_c": hc, "above": [above.value, above.stderr],
         "below": [[e.value, e.stderr] for e in below]},
        {"above_z": 3, "h_c_abs": 1e-6},
        note=f"h_c={hc:.6f}; above {above.value:.4f}+-{above.stderr:.4f}; below |f| "
             + " > ".join(f"{x:.4f}" for x in dist))


@_timed
def check_jensen_nonnegativity(b_values=(CRIT4_B,), h_values=None, sizes=CRIT4_SIZES, K=5, a=1.0, seed=41,
                               require_nonnegative=True) -> CheckResult:
    """Disorder-averaged quenched <= annealed, and every estimate >= -3 stderr."""
    if h_values is None:
        hc = annealed_critical_h(CRIT4_B)
        h_values = (hc + 0.2, hc - 0.2)
    rows = []
    jensen_ok = True
    nonneg_ok = True
    idx = 0
    for b in b_values:
        for h in h_values:
            for n in sizes:
                idx += 1
                box = BoxSpec(2, n)
                ann = estimate_annealed(box, b, h, a, seed=seed + idx, method="auto")
                q = disorder_average(box, b, h, a, K, seed=seed + 1000 + idx)
                comb = float(np.hypot(q.stderr, ann.stderr))
                j = q.mean <= ann.value + 3 * comb
                worst = min([ann.value / max(ann.stderr, 1e-300)]
                            + [e.value / max(e.stderr, 1e-300) for e in q.estimates])
                nn = all(e.value >= -3 * e.stderr for e in [ann, *q.estimates])
                jensen_ok &= bool(j)
                nonneg_ok &= bool(nn)
                rows.append({"b": b, "h": h, "n": n, "quenched": q.mean, "quenched_stderr": q.stderr,
                             "annealed": ann.value, "annealed_stderr": ann.stderr, "jensen": bool(j),
                             "nonnegative": bool(nn), "min_z": worst})
    passed = jensen_ok and (nonneg_ok or not require_nonnegative)
    return CheckResult("jensen and nonnegativity", passed,
                       {"jensen": jensen_ok, "nonnegative": nonneg_ok, "rows": rows}, {"z": 3},
                       note=f"jensen {'ok' if jensen_ok else 'violated'}, nonnegativity "
                            f"{'ok' if nonneg_ok else 'violated'}")


MASSIVE_GRID = (1e-1, 3e-2, 1e-2, 3e-3, 1e-3)


@_timed
def check_massive_scaling(n=64, masses=MASSIVE_GRID, var_band=(0.1, 3.0), z_band=(-3.0, 0.0)) -> CheckResult:
    rows = []
    ok = True
    for m in masses:
        var, ratio = massive_variance_bound(m, n)
        lz = log_partition(build_model(BoxSpec(2, n), m, 0.0, 0.0)) / n**2
        zr = lz / (m * m * abs(np.log(m)))
        good = var_band[0] <= ratio <= var_band[1] and z_band[0] <= zr < z_band[1]
        ok &= bool(good)
        rows.append({"m": m, "variance": var, "variance_ratio": ratio, "logZ_ratio": zr})
    return CheckResult("massive field scaling", ok, {"rows": rows}, {"variance_band": var_band, "logZ_band": z_band},
                       note=" ".join(f"m={r['m']:g}:{r['variance_ratio']:.3f}/{r['logZ_ratio']:.3f}" for r in rows))


@_timed
def check_stirling() -> CheckResult:
    vals = {1: stirling_check(1), 100: stirling_check(100), 10_000: stirling_check(10_000)}
    ok = abs(vals[100] - 1) <= 5e-3 and abs(vals[10_000] - 1) <= 1e-4
    return CheckResult("stirling asymptotics", ok, {str(k): v for k, v in vals.items()},
                       {"100": 5e-3, "10000": 1e-4},
                       note=" ".join(f"l={k}:{v:.6f}" for k, v in vals.items()))


TREND_POINT = (2.0, -0.05)


@_timed
def check_positivity_trend(sizes=(4, 6, 8), K=10, a=1.0, seed=53, epsilon=3.0) -> CheckResult:
    """Positive disorder-averaged free energy inside the d=3 bound region.

    Strict form: the average at the largest ``n`` is positive by two standard
    errors and the averages do not decrease along ``sizes``.  When the Monte
    Carlo signal is below noise (top value within two standard errors of 0,
    or a decrease smaller than two combined standard errors) the check falls
    back to the positivity of the analytic witness bound and reports the
    confidence intervals.  A decrease resolved at two standard errors fails.
    """
    b, h = TREND_POINT
    consts = estimate_constants(3, a)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        region = region_positive_d3(b, h, consts, epsilon=epsilon)
    witness = lower_bound_d3(b, h, None, consts)
    avgs = {n: disorder_average(BoxSpec(3, n), b, h, a, K, seed=seed + n, method="TI") for n in sizes}
    top = avgs[sizes[-1]]
    positive = top.mean >= 2 * top.stderr
    means = [avgs[n].mean for n in sizes]
    steps = [float((means[i + 1] - means[i]) / np.hypot(avgs[sizes[i]].stderr, avgs[sizes[i + 1]].stderr))
             for i in range(len(means) - 1)]
    monotone = all(z >= 0 for z in steps)
    resolved_drop = any(z <= -2 for z in steps)
    strict = bool(region.positive and positive and monotone)
    below_noise = (not positive) or (not monotone and not resolved_drop)
    fallback = bool(not strict and below_noise and region.positive and witness > 0)
    ci = {str(n): (avgs[n].mean - 2 * avgs[n].stderr, avgs[n].mean + 2 * avgs[n].stderr) for n in sizes}
    mode = "strict" if strict else ("fallback" if fallback else "failed")
    return CheckResult(
        "positivity trend (d=3)", strict or fallback,
        {"K": consts.K, "predicate": region.positive, "witness_bound": witness, "mode": mode,
         "means": dict(zip(map(str, sizes), means)),
         "stderr": {str(n): avgs[n].stderr for n in sizes}, "step_z": steps, "ci95": ci},
        {"positive_z": 2, "step_z": -2},
        note=f"[{mode}] K={consts.K:.4f} witness={witness:.4f} means " + ", ".join(
            f"n={n}:{avgs[n].mean:.4f}+-{avgs[n].stderr:.4f}" for n in sizes))


@_timed
def check_bound_consistency(a=1.0, m=0.1, b_small=(0.01, 0.02, 0.03, 0.04, 0.05)) -> CheckResult:
    c2 = estimate_constants(2, a, m)
    c3 = estimate_constants(3, a)
    covered = positive = 0
    exact = True
    for b in np.linspace(0.01, 0.4, 25):
        for h in np.linspace(-0.05, 0.05, 41):
            r = region_positive_d2(b, h, c2)
            covered += r.covered
            if r.positive:
                positive += 1
                s, mm = r.witness
                exact &= lower_bound_d2(b, h, s, mm, c2) > 0
    ratios = {b: critical_curve_d3(b, c3)["bisection"] / (-b * b) for b in b_small}
    scale_ok = all(abs(v / c3.K - 1) <= 0.10 for v in ratios.values())
    return CheckResult("bound self-consistency", bool(exact and scale_ok and positive > 0),
                       {"positive_points": positive, "covered_points": covered, "K": c3.K,
                        "curve_ratio": {str(k): v for k, v in ratios.items()}},
                       {"scaling_rel": 0.10},
                       note=f"{positive} witness re-evaluations > 0; max |ratio/K-1| = "
                            f"{max(abs(v / c3.K - 1) for v in ratios.values()):.4f}")


@_timed
def check_rescale(beta=2.0, a=1.0, v=0.5, N=100_000, seed=5) -> CheckResult:
    """Simulating at temperature beta equals beta=1 with sqrt(beta) a and beta v."""
    box = BoxSpec(2, 1)
    hot = make_model(homogeneous_environment(box, v), a, GaussianModel(box, beta=beta))
    cold = make_model(homogeneous_environment(box, beta * v), np.sqrt(beta) * a)
    e1 = estimate_quenched_IS(hot, N, seed)
    e2 = estimate_quenched_IS(cold, N, seed + 1)
    exact = float(np.log1p(np.expm1(beta * v) * (ndtr(np.sqrt(beta) * a) - ndtr(-np.sqrt(beta) * a))))
    z = abs(e1.value - e2.value) / np.hypot(e1.stderr, e2.stderr)
    ok = z <= 3 and abs(e1.value - exact) <= 3 * e1.stderr
    return CheckResult("beta rescaling", bool(ok), {"beta": e1.value, "unit": e2.value, "exact": exact, "z": z},
                       {"z": 3}, note=f"z={z:.2f}")


SUITES = {
    "walk-matrix": [check_walk_matrix],
    "lemma-massive": [check_massive_scaling],
    "stirling": [check_stirling],
    "oracle": [check_single_site, check_oracle],
    "jensen": [lambda: check_jensen_nonnegativity(b_values=(0.0, 0.5, 1.0), h_values=(-0.3, 0.0, 0.3),
                                                  sizes=(4,), require_nonnegative=False)],
    "rescale": [check_rescale],
}


def run_suite(name: str) -> list[CheckResult]:
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
    return [fn() for fn in SUITES[name]]
