import json

import numpy as np
import pytest

from gffpin._formats import FormatVersionError
from gffpin.lattice import (
    BoxSpec,
    Environment,
    enumerate_edges,
    homogeneous_environment,
    inner_boundary,
    neighbors,
    sample_environment,
    site_signs,
)


def test_edge_counts_small_square():
    edges = enumerate_edges(BoxSpec(2, 2))
    assert edges.num_interior == 4
    assert edges.num_boundary == 8
    assert len(edges) == 12


@pytest.mark.parametrize("d,n", [(1, 5), (2, 3), (2, 7), (3, 4), (4, 2)])
def test_edge_count_formula(d, n):
    edges = enumerate_edges(BoxSpec(d, n))
    assert edges.num_interior == d * (n - 1) * n ** (d - 1)
    assert edges.num_boundary == 2 * d * n ** (d - 1)
    # every interior edge is listed once with i < j
    assert np.all(edges.interior[:, 0] < edges.interior[:, 1])
    assert len({tuple(e) for e in edges.interior}) == edges.num_interior


@pytest.mark.parametrize("d,n,count", [(2, 2, 4), (2, 4, 12), (3, 3, 26), (2, 1, 1)])
def test_inner_boundary(d, n, count):
    assert len(inner_boundary(BoxSpec(d, n))) == count


def test_index_round_trip():
    box = BoxSpec(3, 5)
    idx = np.arange(box.num_sites)
    assert np.array_equal(box.index(box.coords(idx)), idx)
    assert box.center() == box.index((2, 2, 2))


def test_neighbors_and_outer_counts():
    box = BoxSpec(2, 3)
    c = box.center()
    assert sorted(neighbors(box, c)) == sorted(box.index(p) for p in [(0, 1), (2, 1), (1, 0), (1, 2)])
    k = box.outer_neighbor_count()
    assert k[c] == 0 and k[0] == 2 and k.sum() == 2 * 2 * 3


def test_invalid_box():
    with pytest.raises(ValueError):
        BoxSpec(0, 3)
    with pytest.raises(ValueError):
        BoxSpec(2, -1)


def test_environment_deterministic_and_order_independent():
    box = BoxSpec(2, 16)
    e1 = sample_environment(box, 1.0, -0.2, seed=12345)
    e2 = sample_environment(box, 1.0, -0.2, seed=12345)
    assert e1 == e2
    sites = np.array([200, 3, 77, 255, 0])
    assert np.array_equal(site_signs(12345, sites), e1.signs[sites])
    assert not np.array_equal(sample_environment(box, 1.0, -0.2, seed=1).signs, e1.signs)


def test_environment_frozen_signs_value():
    env = sample_environment(BoxSpec(2, 2), 1.0, 0.0, seed=0)
    # frozen reference values of the Philox stream; guards against silent RNG changes
    assert site_signs(0, np.arange(12)).tolist() == [-1, -1, -1, 1, 1, -1, 1, 1, -1, -1, 1, -1]
    assert env.signs.tolist() == [-1, -1, -1, 1]
    assert json.loads(sample_environment(BoxSpec(2, 4), 1.0, -0.2, 4).to_json())["signs"] == "pGw="
    with pytest.raises(ValueError):
        env.signs[0] = 1


def test_environment_clt_band():
    box = BoxSpec(2, 100)
    env = sample_environment(box, 1.0, 0.0, seed=7)
    z = env.signs.sum() / np.sqrt(box.num_sites)
    assert abs(z) < 4


def test_potential_and_homogeneous():
    box = BoxSpec(2, 3)
    env = sample_environment(box, 0.5, -0.1, seed=2)
    assert np.allclose(env.potential, 0.5 * env.signs - 0.1)
    hom = homogeneous_environment(box, 0.3)
    assert np.allclose(hom.potential, 0.3)


def test_environment_json_round_trip():
    env = sample_environment(BoxSpec(3, 5), 0.7, 0.1, seed=99)
    text = env.to_json()
    back = Environment.from_json(text)
    assert back == env
    obj = json.loads(text)
    assert obj["format_version"] == "1.0"
    obj["format_version"] = "2.0"
    with pytest.raises(FormatVersionError):
        Environment.from_json(json.dumps(obj))
