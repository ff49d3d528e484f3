import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import radius_scan

from mapdelta.grid import UniformGrid, pairs_within_naive, radius_pairs


@given(st.integers(0, 10_000), st.sampled_from([2, 3]), st.floats(0.1, 3.0))
def test_radius_pairs_equals_scan(seed, d, r):
    rng = np.random.default_rng(seed)
    q = rng.uniform(-5, 5, (40, d))
    p = rng.uniform(-5, 5, (60, d))
    qi, pj = radius_pairs(q, p, r)
    assert sorted(zip(qi.tolist(), pj.tolist())) == radius_scan(q, p, r)
    nq, npj = pairs_within_naive(q, p, r)
    assert sorted(zip(nq.tolist(), npj.tolist())) == radius_scan(q, p, r)


def test_boundary_distance_included():
    qi, pj = radius_pairs(np.zeros((1, 3)), np.array([[1.0, 0, 0], [1.0 + 1e-9, 0, 0]]), 1.0)
    assert pj.tolist() == [0]


def test_empty_inputs_and_bad_cell():
    qi, pj = radius_pairs(np.zeros((0, 2)), np.zeros((3, 2)), 1.0)
    assert len(qi) == 0
    qi, pj = radius_pairs(np.zeros((2, 2)), np.zeros((0, 2)), 1.0)
    assert len(qi) == 0
    with pytest.raises(ValueError):
        UniformGrid(np.zeros((3, 2)), 0.0)
