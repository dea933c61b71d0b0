import numpy as np
import pytest

from gffpin._formats import FormatVersionError
from gffpin.gaussfield import (
    FieldConfig,
    GaussianModel,
    build_model,
    field_from_bytes,
    field_from_csv,
    field_to_bytes,
    field_to_csv,
    log_partition,
    log_window_probability,
    marginal_summary,
    overlap_derivative,
    overlap_loss,
    precision_matrix,
    sample_exact,
    window_probability,
)
from gffpin.lattice import BoxSpec

G3_WATSON = 1.5163860591519784


def test_two_by_two_covariance_exact():
    cov = build_model(BoxSpec(2, 2), 0.0).covariance()
    assert cov[0, 0] == pytest.approx(7 / 6, abs=1e-13)
    assert cov[0, 1] == pytest.approx(1 / 3, abs=1e-13)
    assert cov[0, 3] == pytest.approx(1 / 6, abs=1e-13)


def test_precision_structure():
    Q = precision_matrix(BoxSpec(2, 3), m=0.2).toarray()
    assert np.allclose(Q, Q.T)
    assert np.allclose(np.diag(Q), 1 + 2 * 0.04)
    assert np.all(np.linalg.eigvalsh(Q) > 0)


def test_single_site_log_partition_with_boundary():
    # one site, four boundary neighbours at height bc: log Z - log Z_ref = 0
    # for every bc since the field just shifts by bc
    for bc in (0.0, 0.7, -2.0):
        assert log_partition(build_model(BoxSpec(2, 1), 0.0, bc)) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("d,n", [(2, 4), (3, 3)])
def test_boundary_shift_invariance(d, n):
    # massless field with bc = center = c is the bc = 0 field shifted by c
    box = BoxSpec(d, n)
    ref = log_partition(build_model(box, 0.3, 0.0))
    for c in (0.5, -1.3):
        model = build_model(box, 0.3, c)
        assert log_partition(model) == pytest.approx(ref, abs=1e-10)
        assert np.allclose(model.mean, c, atol=1e-10)


def test_mean_decays_from_boundary():
    box = BoxSpec(2, 9)
    model = build_model(box, 0.0, bc=1.0, center=0.0)
    assert np.allclose(model.mean, 1.0)  # massless: harmonic extension of a constant
    massive = build_model(box, 0.3, bc=1.0, center=0.0)
    mean = massive.mean
    assert mean[box.center()] < mean[box.index((0, 4))] < 1.0
    assert mean.min() > 0


def test_variance_increases_with_box():
    vals = [build_model(BoxSpec(2, n)).variance_at(BoxSpec(2, n).center())[0] for n in (3, 5, 9, 17)]
    assert np.all(np.diff(vals) > 0)


def test_d3_variance_below_infinite_volume_green():
    box = BoxSpec(3, 11)
    var = build_model(box).variance_at(box.center())[0]
    assert 1.0 < var < G3_WATSON


def test_sparse_and_dense_paths_agree():
    box = BoxSpec(2, 70)  # 4900 sites: sparse path
    model = build_model(box, 0.1, 0.5, 0.0)
    assert not model.dense
    c = box.center()
    var = model.variance_at([c, 0])
    small = build_model(BoxSpec(2, 8), 0.1, 0.5, 0.0)
    assert small.dense
    assert var[0] > var[1] > 0
    assert np.isfinite(model.logdet())


def test_window_probability_values():
    assert window_probability(1.0, 1.0, 1.0) == pytest.approx(0.4772498680518208, abs=1e-12)
    assert window_probability(0.0, 1.0, 1.0) == pytest.approx(0.6826894921370859, abs=1e-12)
    # upper-tail windows keep full accuracy
    p = window_probability(40.0, 1.0, 1.0)
    assert 0 < p < 1e-300 or p == 0.0
    assert window_probability(10.0, 1.0, 1.0) == pytest.approx(7.6198530241605e-24, rel=1e-8)
    arr = window_probability(np.array([0.0, 1.0]), 1.0, 1.0, s=0.0)
    assert arr.shape == (2,)


def test_overlap_derivative_is_valid_slope():
    var, a = 2.0, 1.0
    c1 = overlap_derivative(var, a)
    s = np.linspace(1e-4, a / 4, 500)
    assert np.all(overlap_loss(var, a, s) >= c1 * s - 1e-14)
    assert c1 > 0


def test_sampling_moments():
    model = build_model(BoxSpec(2, 3), 0.0, bc=0.5)
    x = sample_exact(model, np.random.default_rng(3), 40_000)
    assert x.shape == (40_000, 9)
    cov = model.covariance()
    se = np.sqrt(np.diag(cov) / len(x))
    assert np.all(np.abs(x.mean(axis=0) - model.mean) < 4.5 * se)
    assert np.allclose(np.cov(x.T), cov, atol=0.05)
    one = sample_exact(model, np.random.default_rng(3))
    assert one.shape == (9,)


def test_marginal_summary():
    box = BoxSpec(2, 2)
    s = marginal_summary(build_model(box))
    assert np.allclose(s.variance, 7 / 6)
    assert s.log_partition == pytest.approx(0.0, abs=1e-14)


def test_beta_scaling():
    box = BoxSpec(2, 3)
    cold = GaussianModel(box, beta=2.0)
    assert np.allclose(cold.covariance(), build_model(box).covariance() / 2)


def test_invalid_model_parameters():
    with pytest.raises(ValueError):
        build_model(BoxSpec(2, 2), -0.1)
    with pytest.raises(ValueError):
        GaussianModel(BoxSpec(2, 2), beta=0.0)


def test_field_csv_round_trip():
    box = BoxSpec(2, 3)
    cfg = FieldConfig(box, np.linspace(-1, 1, 9) + 1e-7)
    text = field_to_csv(cfg)
    assert text.splitlines()[0] == "site_index,x1,x2,phi"
    back = field_from_csv(text)
    assert back.box == box and np.array_equal(back.values, cfg.values)


def test_field_binary_round_trip_and_version():
    box = BoxSpec(3, 2)
    cfg = FieldConfig(box, np.arange(8) * 0.25)
    data = field_to_bytes(cfg)
    assert data[:4] == b"GFFD"
    back = field_from_bytes(data)
    assert np.array_equal(back.values, cfg.values)
    bumped = data[:4] + (2).to_bytes(2, "little") + data[6:]
    with pytest.raises(FormatVersionError):
        field_from_bytes(bumped)


def test_field_config_validation():
    with pytest.raises(ValueError):
        FieldConfig(BoxSpec(2, 2), np.zeros(3))
    with pytest.raises(ValueError):
        FieldConfig(BoxSpec(2, 1), np.array([np.nan]))


def test_log_window_probability_tails():
    for mu in (0.0, 0.5, -3.0, 10.0):
        assert log_window_probability(mu, 1.0, 1.0) == pytest.approx(np.log(window_probability(mu, 1.0, 1.0)))
    # far tail: finite and symmetric, close to the Mills-ratio asymptotics
    far = log_window_probability(40.0, 1.0, 1.0)
    assert far == log_window_probability(-40.0, 1.0, 1.0)
    assert far == pytest.approx(-0.5 * 39**2 - np.log(39 * np.sqrt(2 * np.pi)), abs=1e-3)
