import numpy as np
import pytest

from gffpin.gaussfield import build_model, log_partition
from gffpin.lattice import BoxSpec
from gffpin.walk import (
    DivergentGreenFunction,
    WalkKernel,
    box_return_traces,
    green_infinite,
    green_infinite_with_error,
    green_restricted,
    green_restricted_rows,
    killed_green_infinite,
    massive_variance_bound,
    ratio_Z_series,
    ratio_Z_series_detail,
    return_probabilities,
    return_probability,
    stirling_check,
    walk_mass_history,
)

# closed form for the simple random walk on Z^3
G3_WATSON = 1.5163860591519784
# value for Z^4 from the same series evaluated to high order
G4_REFERENCE = 1.2394671218


def test_return_probabilities_small():
    assert return_probability(2, 2) == pytest.approx(1 / 4, abs=1e-15)
    assert return_probability(2, 4) == pytest.approx(9 / 64, abs=1e-15)
    assert return_probability(3, 2) == pytest.approx(1 / 6, abs=1e-15)
    assert return_probability(2, 3) == 0.0
    assert return_probability(1, 4) == pytest.approx(6 / 16, abs=1e-15)


def test_return_probabilities_match_brute_force():
    # direct convolution of the step distribution on Z^3
    steps = 10
    size = 2 * steps + 1
    p = np.zeros((size,) * 3)
    p[(steps,) * 3] = 1.0
    expect = [1.0]
    for _ in range(steps):
        q = np.zeros_like(p)
        for ax in range(3):
            q += np.roll(p, 1, axis=ax) + np.roll(p, -1, axis=ax)
        p = q / 6
        expect.append(p[(steps,) * 3])
    assert np.allclose(return_probabilities(3, steps), expect, atol=1e-15)


def test_stirling():
    assert abs(stirling_check(100) - 1) < 5e-3
    assert abs(stirling_check(10_000) - 1) < 1e-4
    assert stirling_check(1) == pytest.approx(np.pi / 4)


def test_green_infinite_d3_watson():
    g, err = green_infinite_with_error(3)
    assert g == pytest.approx(G3_WATSON, abs=1e-8)
    assert err < 1e-6
    assert green_infinite(4) == pytest.approx(G4_REFERENCE, abs=1e-8)


def test_green_infinite_diverges_in_low_dimension():
    for d in (1, 2):
        with pytest.raises(DivergentGreenFunction):
            green_infinite(d)
    with pytest.raises(DivergentGreenFunction):
        green_restricted(WalkKernel(2), 0, 0)


def test_killed_green_infinite():
    # rho -> 0: only the starting point counts
    assert killed_green_infinite(2, 0.0) == pytest.approx(1.0)
    # monotone in survival, diverging logarithmically as survival -> 1
    vals = [killed_green_infinite(2, 1 - 10.0**-k) for k in (1, 2, 3, 4)]
    assert np.all(np.diff(vals) > 0)
    # each decade adds log(10)/pi asymptotically
    assert np.diff(vals)[-1] == pytest.approx(np.log(10) / np.pi, rel=0.01)


@pytest.mark.parametrize("d,n,m", [(2, 2, 0.0), (2, 4, 0.1), (3, 4, 0.5), (2, 8, 0.0), (3, 2, 0.1)])
def test_walk_matrix_duality(d, n, m):
    box = BoxSpec(d, n)
    cov = build_model(box, m).covariance()
    res = green_restricted_rows(WalkKernel.from_mass(d, m, box), np.arange(box.num_sites))
    assert np.max(np.abs(res.values - cov)) < 1e-10
    c = box.center()
    assert green_restricted(WalkKernel.from_mass(d, m, box), c, c) == pytest.approx(cov[c, c], abs=1e-10)


def test_zero_survival_kernel():
    box = BoxSpec(2, 4)
    k = WalkKernel(2, survival=0.0, box=box)
    assert green_restricted(k, 5, 5) == 1.0
    assert green_restricted(k, 5, 6) == 0.0


def test_mass_conservation():
    box = BoxSpec(2, 5)
    kernel = WalkKernel(2, survival=0.9, box=box)
    alive, exited, killed = walk_mass_history(kernel, box.center(), 60)
    total = alive + exited + killed
    assert np.allclose(total, 1.0, atol=1e-14)
    assert np.all(np.diff(alive) <= 1e-15)


def test_box_traces_match_matrix_powers():
    box = BoxSpec(2, 4)
    P = np.eye(box.num_sites) - build_model(box).Q.toarray()
    t = box_return_traces(box, 8)
    M = np.eye(box.num_sites)
    for k in range(9):
        assert t[k] == pytest.approx(np.trace(M), abs=1e-12)
        M = M @ P


@pytest.mark.parametrize("m,n", [(0.2, 8), (0.05, 16), (0.3, 5)])
def test_ratio_series_matches_logdet(m, n):
    direct = -log_partition(build_model(BoxSpec(2, n), m, 0.0, 0.0)) / n**2
    assert ratio_Z_series(m, n) == pytest.approx(direct, abs=1e-12)


def test_ratio_series_frozen_value():
    assert ratio_Z_series(0.2, 8) == pytest.approx(0.0574172872, abs=1e-9)
    res = ratio_Z_series_detail(0.2, 8)
    assert res.tail_bound < 1e-13
    assert ratio_Z_series(0.0, 8) == 0.0


def test_massive_variance_monotone_in_mass():
    vals = [massive_variance_bound(m, 32)[0] for m in (0.3, 0.1, 0.03, 0.01)]
    assert np.all(np.diff(vals) > 0)
    with pytest.raises(ValueError):
        massive_variance_bound(0.6, 32)
    with pytest.raises(ValueError):
        massive_variance_bound(0.1, 2)


def test_massive_variance_frozen():
    var, ratio = massive_variance_bound(0.1, 64)
    assert var == pytest.approx(1.8914, abs=1e-4)
    assert ratio == pytest.approx(var / np.log(10))
