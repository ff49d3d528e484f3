import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import knn_scan

from mapdelta.matching import (
    KnnResult,
    Matches,
    adaptive_iterations,
    bidirectional_filter,
    epipolar_filter,
    fundamental_8point,
    knn_match,
    lowe_filter,
    sampson_distance,
)


def test_exact_duplicate_is_first_with_zero_distance():
    rng = np.random.default_rng(0)
    b = rng.normal(size=(30, 8))
    a = b[[7]].copy()
    r = knn_match(a, b)
    assert r.idx[0, 0] == 7 and r.dist[0, 0] == 0


def test_equidistant_neighbours_lower_index_wins():
    b = np.array([[1.0, 0], [0, 1.0], [-1.0, 0], [0, -1.0]])
    r = knn_match(np.zeros((1, 2)), b)
    assert r.idx[0].tolist() == [0, 1]


def test_many_ties_beyond_shortlist():
    b = np.vstack([np.full((3, 4), 5.0), np.ones((12, 4))])
    r = knn_match(np.zeros((1, 4)), b, k=2)
    assert r.idx[0].tolist() == [3, 4]


def test_errors():
    with pytest.raises(ValueError):
        knn_match(np.zeros((2, 3)), np.zeros((4, 4)))
    with pytest.raises(ValueError):
        knn_match(np.zeros((2, 3)), np.zeros((1, 3)))


@given(st.integers(0, 10_000), st.integers(2, 60), st.integers(2, 60), st.integers(1, 3))
def test_knn_equals_exhaustive_scan(seed, na, nb, k):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(na, 5)).astype(np.float32)
    b = rng.normal(size=(nb, 5)).astype(np.float32)
    if nb < k:
        return
    r = knn_match(a, b, k=k, chunk=7)
    idx, dist = knn_scan(a, b, k)
    assert np.array_equal(r.idx, idx)
    assert np.allclose(r.dist, dist, atol=1e-9)


def test_lowe_examples():
    knn = KnnResult(np.array([[0, 1], [1, 0], [2, 0]]), np.array([[1.0, 2.0], [1.9, 2.0], [0.0, 0.0]]))
    m = lowe_filter(knn, 0.8)
    assert m.idx_a.tolist() == [0]
    # both-zero distances give ratio 1: kept only when the limit admits 1
    assert lowe_filter(knn, 1.0).idx_a.tolist() == [0, 1, 2]


@given(st.integers(0, 10_000))
def test_lowe_equals_definition(seed):
    rng = np.random.default_rng(seed)
    d = np.sort(rng.uniform(0, 3, (40, 2)), axis=1)
    knn = KnnResult(rng.integers(0, 50, (40, 2)), d)
    m = lowe_filter(knn, 0.8)
    expect = [i for i in range(40) if (d[i, 0] / d[i, 1] if d[i, 1] > 0 else 1.0) <= 0.8]
    assert m.idx_a.tolist() == expect
    assert np.all(m.ratio <= 0.8) and np.all(m.ratio > 0)


def test_bidirectional_examples():
    ab = Matches([0, 1], [5, 6], [1, 1], [0.5, 0.5])
    ba = Matches([5, 6], [0, 2], [1, 1], [0.5, 0.5])
    assert bidirectional_filter(ab, ba).pairs() == {(0, 5)}


@given(st.integers(0, 10_000))
def test_bidirectional_equals_intersection(seed):
    rng = np.random.default_rng(seed)
    ab = Matches(np.arange(30), rng.integers(0, 10, 30), np.ones(30), np.ones(30))
    ba = Matches(np.arange(10), rng.integers(0, 30, 10), np.ones(10), np.ones(10))
    got = bidirectional_filter(ab, ba).pairs()
    assert got == {(a, b) for a, b in ab.pairs() if (b, a) in ba.pairs()}


def _two_view(rng, n, outlier_frac):
    """Random 3D points seen by two cameras with known relative pose."""
    X = rng.uniform([-5, -3, 8], [5, 3, 20], (n, 3))
    K = np.array([[500, 0, 320], [0, 500, 240], [0, 0, 1.0]])
    ang = 0.1
    R = np.array([[np.cos(ang), 0, np.sin(ang)], [0, 1, 0], [-np.sin(ang), 0, np.cos(ang)]])
    t = np.array([1.0, 0.1, 0.2])
    pa = X @ K.T
    pa = pa[:, :2] / pa[:, 2:]
    Xb = X @ R.T + t
    pb = Xb @ K.T
    pb = pb[:, :2] / pb[:, 2:]
    n_out = int(outlier_frac * n)
    out = rng.choice(n, n_out, replace=False)
    pb[out] = rng.uniform([0, 0], [640, 480], (n_out, 2))
    truth = np.ones(n, bool)
    truth[out] = False
    return pa, pb, truth


def test_epipolar_filter_on_rigid_scene():
    rng = np.random.default_rng(1)
    pa, pb, truth = _two_view(rng, 300, 0.2)
    m = Matches(np.arange(300), np.arange(300), np.ones(300), np.ones(300))
    res = epipolar_filter(m, pa, pb, seed=0)
    kept = np.zeros(300, bool)
    kept[res.matches.idx_a] = True
    assert (kept & truth).sum() >= 0.95 * truth.sum()
    assert (~kept & ~truth).sum() >= 0.9 * (~truth).sum()


def test_epipolar_passthrough_cases():
    m = Matches(np.arange(7), np.arange(7), np.ones(7), np.ones(7))
    px = np.random.default_rng(0).uniform(0, 100, (7, 2))
    assert epipolar_filter(m, px, px).matches is m
    line = np.column_stack([np.arange(20.0), 2 * np.arange(20.0)])
    m20 = Matches(np.arange(20), np.arange(20), np.ones(20), np.ones(20))
    res = epipolar_filter(m20, line, line)
    assert res.degenerate and len(res.matches) == 20


def test_planar_matches_all_retained():
    rng = np.random.default_rng(2)
    H = np.array([[1.1, 0.02, 5], [0.01, 0.95, -3], [1e-4, 0, 1]])
    pa = rng.uniform(0, 500, (100, 2))
    h = np.c_[pa, np.ones(100)] @ H.T
    pb = h[:, :2] / h[:, 2:]
    m = Matches(np.arange(100), np.arange(100), np.ones(100), np.ones(100))
    assert len(epipolar_filter(m, pa, pb, seed=3).matches) == 100


def test_fundamental_satisfies_constraint():
    rng = np.random.default_rng(4)
    pa, pb, _ = _two_view(rng, 50, 0.0)
    F = fundamental_8point(pa, pb)
    assert np.linalg.matrix_rank(F, tol=1e-10) == 2
    assert sampson_distance(F, pa, pb).max() < 1e-6


def test_adaptive_iterations():
    assert adaptive_iterations(0.0, 4, 0.999, 2000) == 2000
    assert adaptive_iterations(1.0, 4, 0.999, 2000) == 1
    assert adaptive_iterations(0.5, 4, 0.999, 2000) == int(np.ceil(np.log(0.001) / np.log(1 - 0.5**4)))
