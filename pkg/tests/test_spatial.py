import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from uvdisp.spatial import (PointIndex, brute_force_nn, build_hull, build_hull_mask, chamfer_brute,
                            chamfer_pruned)

coords = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def test_nearest_simple():
    idx = PointIndex([[0, 0, 0], [1, 0, 0]])
    i, d2 = idx.nearest([0.4, 0, 0])
    assert i == 0 and d2 == pytest.approx(0.16, abs=1e-15)
    assert idx.nearest([1, 0, 0]) == (1, 0.0)


def test_nearest_ties_lowest_index():
    idx = PointIndex([[1, 0, 0], [-1, 0, 0], [0, 1, 0]])
    assert idx.nearest([0, 0, 0])[0] == 0
    idx = PointIndex([[0, 1, 0], [1, 0, 0], [0, 1, 0]])
    assert idx.nearest([0, 1, 0])[0] == 0


def test_nearest_matches_brute_force(rng):
    pts = rng.random((500, 3))
    q = rng.random((500, 3))
    i1, d1 = PointIndex(pts).query(q)
    i2, d2 = brute_force_nn(q, pts)
    assert np.array_equal(i1, i2)
    assert np.array_equal(d1, d2)


def test_empty_index_rejected():
    with pytest.raises(ValueError):
        PointIndex(np.zeros((0, 3)))


def test_chamfer_identical_is_zero(rng):
    p = rng.random((50, 3))
    r = chamfer_pruned(p, p, 0.5)
    assert r.value == 0.0 and r.n_forward == 50 and r.n_backward == 50


def test_chamfer_hand_example():
    r = chamfer_pruned([[0, 0, 0]], [[0, 0, 0], [5, 0, 0]], 1.0)
    assert r.forward == 0.0 and r.backward == 0.0 and r.value == 0.0
    assert r.n_forward == 1 and r.n_backward == 1


def test_chamfer_empty_direction_flag():
    r = chamfer_pruned([[0, 0, 0]], [[5, 0, 0]], 1.0)
    assert r.value == 0.0 and r.empty_direction


def test_chamfer_unpruned_matches_brute(rng):
    a, b = rng.normal(size=(200, 3)), rng.normal(size=(180, 3))
    assert abs(chamfer_pruned(a, b, np.inf).value - chamfer_brute(a, b)) < 1e-12


def test_chamfer_unsquared_mode(rng):
    a, b = rng.normal(size=(60, 3)), rng.normal(size=(70, 3))
    for thr in (0.3, 0.8, np.inf):
        got = chamfer_pruned(a, b, thr, squared=False).value
        assert abs(got - chamfer_brute(a, b, thr, squared=False)) < 1e-12


def test_prune_uses_unsquared_distance():
    # d = 0.9: survives threshold 1.0 and contributes d^2 = 0.81
    r = chamfer_pruned([[0, 0, 0]], [[0.9, 0, 0]], 1.0)
    assert r.value == pytest.approx(2 * 0.81)


def test_chamfer_rejects_bad_input():
    with pytest.raises(ValueError):
        chamfer_pruned([[0, 0, 0]], [[1, 0, 0]], 0.0)
    with pytest.raises(ValueError):
        chamfer_pruned(np.zeros((0, 3)), [[1, 0, 0]])


@given(arrays(np.float64, (12, 3), elements=coords), arrays(np.float64, (9, 3), elements=coords),
       st.floats(0.05, 20))
def test_chamfer_symmetric(a, b, thr):
    assert chamfer_pruned(a, b, thr).value == pytest.approx(chamfer_pruned(b, a, thr).value, abs=1e-12)


@given(arrays(np.float64, (10, 3), elements=coords), st.floats(0.01, 10))
def test_chamfer_self_zero(a, thr):
    assert chamfer_pruned(a, a, thr).value == 0.0


@given(arrays(np.float64, (10, 3), elements=coords), arrays(np.float64, (8, 3), elements=coords),
       st.floats(0.01, 5), st.floats(0.0, 5))
def test_survivors_monotone(a, b, t1, dt):
    r1 = chamfer_pruned(a, b, t1)
    r2 = chamfer_pruned(a, b, t1 + dt)
    assert r2.n_forward >= r1.n_forward and r2.n_backward >= r1.n_backward


@given(arrays(np.float64, (15, 3), elements=coords), arrays(np.float64, (12, 3), elements=coords),
       st.floats(0.05, 10))
def test_chamfer_matches_brute_oracle(a, b, thr):
    assert abs(chamfer_pruned(a, b, thr).value - chamfer_brute(a, b, thr)) < 1e-9


CUBE = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)


def test_hull_cube():
    m = build_hull_mask(CUBE, [[0.5, 0.5, 0.5], [2, 0, 0], [0.7, 0.7, 0.7], [1.1, 1.1, 1.1]], 1.0, 0.0)
    assert list(m) == [True, False, True, False]


def test_hull_expansion():
    # the 1.5x hull about the centre spans [-0.25, 1.25] per axis
    q = [[1.2, 1.2, 1.2], [1.2, 0.5, 0.5], [1.3, 0.5, 0.5], [-0.2, 0.5, 0.5]]
    assert list(build_hull_mask(CUBE, q, 1.0, 0.0)) == [False, False, False, False]
    assert list(build_hull_mask(CUBE, q, 1.5, 0.0)) == [True, True, False, True]


def test_hull_floor_quantile(rng):
    low = np.column_stack([rng.random(30), np.full(30, -10.0), rng.random(30)])
    high = rng.random((70, 3))
    hull = build_hull(np.concatenate([low, high]), 1.0, 0.3)
    assert np.all(hull.vertices[:, 1] >= 0)


def test_hull_degenerate():
    flat = np.column_stack([np.random.default_rng(0).random((20, 2)), np.zeros(20)])
    with pytest.raises(ValueError, match="degenerate"):
        build_hull(flat, 1.5, 0.0)


@given(arrays(np.float64, 3, elements=st.floats(-50, 50)), st.floats(1.0, 2.0))
def test_hull_translation_invariant(t, s):
    rng = np.random.default_rng(5)
    cloud = rng.normal(size=(60, 3))
    q = rng.normal(size=(100, 3)) * 1.5
    a = build_hull_mask(cloud, q, s, 0.3)
    b = build_hull_mask(cloud + t, q + t, s, 0.3)
    # allow disagreement only for points numerically on the boundary
    hull = build_hull(cloud, s, 0.3)
    margin = np.max(q @ hull.equations[:, :3].T + hull.equations[:, 3], axis=1)
    assert np.all((a == b) | (np.abs(margin) < 1e-9))
