import numpy as np
import pytest
from scipy.special import ndtr
from scipy.stats import truncnorm

from gffpin.gaussfield import build_model
from gffpin.lattice import BoxSpec, homogeneous_environment, sample_environment
from gffpin.pinning import (
    EstimatorError,
    FreeEnergyEstimate,
    RESULT_COLUMNS,
    annealed_strength,
    append_results_csv,
    batch_means,
    disorder_average,
    estimate_annealed,
    estimate_quenched,
    estimate_quenched_IS,
    estimate_quenched_TI,
    genz_box_probability,
    make_model,
    oracle_free_energy,
    oracle_Z_ratio,
    potential_energy,
    read_results_csv,
    results_from_json,
    results_to_json,
    sample_square_well_conditional,
)

SINGLE_SITE = float(np.log1p(np.expm1(0.5) * (ndtr(1.0) - ndtr(-1.0))))
# oracle for the 3x3 box, environment seed 5, b=1, h=-0.3, a=1 (frozen)
ORACLE_3X3 = 0.1267341


def single_site_model(v=0.5, a=1.0):
    return make_model(homogeneous_environment(BoxSpec(2, 1), v), a)


def test_single_site_oracle_closed_form():
    assert oracle_free_energy(single_site_model()) == pytest.approx(SINGLE_SITE, abs=1e-10)
    assert SINGLE_SITE == pytest.approx(0.3666377860, abs=1e-9)


def test_oracle_frozen_3x3():
    model = make_model(sample_environment(BoxSpec(2, 3), 1.0, -0.3, 5), 1.0)
    assert oracle_free_energy(model) == pytest.approx(ORACLE_3X3, abs=2e-6)


def test_oracle_two_sites_against_direct_quadrature():
    # two sites on a 2x1 slab is not a box; use d=1, n=2 and integrate on a grid
    box = BoxSpec(1, 2)
    env = homogeneous_environment(box, 0.0)
    env = type(env)(box, 0.0, 0.0, np.array([1, 1]), 0)
    model = make_model(type(env)(box, 0.8, 0.0, np.array([1, -1]), 0), 0.7)
    cov = build_model(box).covariance()
    g = np.linspace(-9, 9, 1801)
    X, Y = np.meshgrid(g, g, indexing="ij")
    prec = np.linalg.inv(cov)
    dens = np.exp(-0.5 * (prec[0, 0] * X**2 + 2 * prec[0, 1] * X * Y + prec[1, 1] * Y**2))
    weight = np.exp(0.8 * (np.abs(X) <= 0.7) - 0.8 * (np.abs(Y) <= 0.7))
    ratio = (dens * weight).sum() / dens.sum()
    assert oracle_Z_ratio(model) == pytest.approx(ratio, rel=2e-3)


def test_genz_probability_independent_case():
    mean = np.zeros(3)
    cov = np.diag([1.0, 2.0, 0.5])
    lo, hi = -np.ones(3), np.ones(3)
    p, se = genz_box_probability(mean, cov, lo, hi)
    exact = np.prod(ndtr(1 / np.sqrt(np.diag(cov))) - ndtr(-1 / np.sqrt(np.diag(cov))))
    assert p == pytest.approx(exact, abs=1e-10)
    assert se < 1e-8


def test_conditional_sampler_matches_mixture():
    rng = np.random.default_rng(0)
    mu, sd, a, logv = 0.3, 0.8, 1.0, 1.5
    x = sample_square_well_conditional(np.full(200_000, mu), sd, a, np.full(200_000, logv), rng)
    lo, hi = (-a - mu) / sd, (a - mu) / sd
    w_in = np.exp(logv) * (ndtr(hi) - ndtr(lo))
    w_out = 1 - (ndtr(hi) - ndtr(lo))
    p_in = w_in / (w_in + w_out)
    frac = np.mean(np.abs(x) <= a)
    assert frac == pytest.approx(p_in, abs=4 * np.sqrt(p_in * (1 - p_in) / len(x)))
    inside = x[np.abs(x) <= a]
    tn = truncnorm(lo, hi, loc=mu, scale=sd)
    assert inside.mean() == pytest.approx(tn.mean(), abs=4 * tn.std() / np.sqrt(len(inside)))


def test_conditional_sampler_far_tails():
    rng = np.random.default_rng(1)
    # window about 39 sd away: log window mass is near -765
    mu = np.array([40.0, -40.0, 40.0, 0.0])
    logv = np.array([800.0, 800.0, 50.0, -60.0])
    x = sample_square_well_conditional(mu, 1.0, 1.0, logv, rng)
    assert np.all(np.isfinite(x))
    assert abs(x[0]) <= 1.0 and abs(x[1]) <= 1.0
    assert x[2] > 1.0 and abs(x[3]) > 1.0


def test_potential_energy_closed_window():
    model = single_site_model(0.5, 1.0)
    assert potential_energy(model, np.array([1.0])) == 0.5
    assert potential_energy(model, np.array([1.0 + 1e-12])) == 0.0
    batch = potential_energy(model, np.array([[0.0], [2.0]]))
    assert batch.tolist() == [0.5, 0.0]


def test_is_single_site():
    est = estimate_quenched_IS(single_site_model(), 100_000, seed=1)
    assert abs(est.value - SINGLE_SITE) < 3 * est.stderr
    assert est.stderr < 0.005
    again = estimate_quenched_IS(single_site_model(), 100_000, seed=1)
    assert again.value == est.value


def test_ti_single_site():
    est = estimate_quenched_TI(single_site_model(), seed=4)
    assert abs(est.value - SINGLE_SITE) < 3 * est.stderr
    assert est.stderr < 0.005


def test_estimators_agree_with_oracle_small_box():
    model = make_model(sample_environment(BoxSpec(2, 3), 1.0, -0.3, 5), 1.0)
    is_est = estimate_quenched_IS(model, 50_000, seed=2)
    ti_est = estimate_quenched_TI(model, seed=2)
    for est in (is_est, ti_est):
        assert abs(est.value - ORACLE_3X3) < 3 * est.stderr


def test_zero_potential_is_exactly_zero():
    model = single_site_model(0.0)
    assert estimate_quenched_IS(model, 100).value == 0.0
    assert estimate_quenched_TI(model).value == 0.0


def test_dispatch_and_unknown_method():
    model = single_site_model(0.1)
    assert estimate_quenched(model, "auto", N=1000).estimator == "IS"
    strong = make_model(sample_environment(BoxSpec(2, 6), 3.0, 0.0, 1), 1.0)
    assert estimate_quenched(strong, "auto", sweeps=50, burn_in=10).estimator == "TI"
    assert estimate_quenched(model, "ORACLE").estimator == "ORACLE"
    with pytest.raises(ValueError):
        estimate_quenched(model, "MAGIC")


def test_annealed_strength():
    assert annealed_strength(1.0, 0.0) == pytest.approx(np.log(np.cosh(1.0)), abs=1e-15)
    assert annealed_strength(30.0, -1.0) == pytest.approx(29.0 - np.log(2), abs=1e-12)


def test_annealed_equals_quenched_without_disorder():
    box = BoxSpec(2, 2)
    ann = estimate_annealed(box, 0.0, 0.2, 1.0, N=5000, seed=3)
    q = estimate_quenched(make_model(homogeneous_environment(box, 0.2), 1.0), "IS", 5000, 3)
    assert ann.value == q.value


def test_disorder_average_structure():
    avg = disorder_average(BoxSpec(2, 2), 1.0, 0.0, 1.0, K=4, N=4000, seed=9)
    assert len(avg.values) == 4 and len(set(avg.env_seeds)) == 4
    assert avg.mean == pytest.approx(np.mean(avg.values))
    assert avg.stderr == pytest.approx(np.std(avg.values, ddof=1) / 2)
    again = disorder_average(BoxSpec(2, 2), 1.0, 0.0, 1.0, K=4, N=4000, seed=9)
    assert again.values == avg.values
    one = disorder_average(BoxSpec(2, 2), 1.0, 0.0, 1.0, K=1, N=4000, seed=9)
    assert one.stderr == pytest.approx(one.estimates[0].stderr)
    with pytest.raises(ValueError):
        disorder_average(BoxSpec(2, 2), 1.0, 0.0, 1.0, K=0)


def test_batch_means_iid():
    x = np.random.default_rng(0).standard_normal(20_000)
    mean, se = batch_means(x)
    assert se == pytest.approx(1 / np.sqrt(len(x)), rel=0.5)


def test_estimate_validation():
    with pytest.raises(EstimatorError):
        FreeEnergyEstimate(float("nan"), 0.1, 10, "IS", 0)
    with pytest.raises(EstimatorError):
        FreeEnergyEstimate(0.0, -1.0, 10, "IS", 0)


def test_results_round_trip(tmp_path):
    est = estimate_quenched_IS(single_site_model(), 1000, seed=0)
    rec = est.record(2, 1, 1.0, 0.0, 0.5)
    assert list(rec) == RESULT_COLUMNS
    back = results_from_json(results_to_json([rec, rec]))
    assert back == [rec, rec]
    path = tmp_path / "res.csv"
    append_results_csv(path, [rec])
    append_results_csv(path, [rec])
    rows = read_results_csv(path.read_text())
    assert len(rows) == 2 and float(rows[1]["value"]) == rec["value"]
