import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cfcrn.engine import ShapeError
from cfcrn.targets import (CentroidList, DensityTarget, KernelSpec, ProximitySpec, density_map,
                           gaussian_kernel, make_lrgt, nearest_distance, proximity_map, sum_pool)


def cl(points, dims=(64, 64)):
    return CentroidList("t", np.array(points, dtype=int).reshape(-1, 2), dims)


def test_kernel_normalised_and_sized():
    g = gaussian_kernel(KernelSpec(3.0, 10))
    assert g.shape == (21, 21)
    assert abs(g.sum() - 1.0) < 1e-6


def test_kernel_symmetric():
    g = gaussian_kernel(KernelSpec(5.0, 10))
    np.testing.assert_array_equal(g, g[::-1, :])
    np.testing.assert_array_equal(g, g[:, ::-1])
    np.testing.assert_allclose(g, g.T)


def test_kernel_matches_formula():
    spec = KernelSpec(3.0, 10)
    g = gaussian_kernel(spec)
    r = np.arange(-10, 11)
    raw = np.array([[math.exp(-(a * a + b * b) / 18.0) for b in r] for a in r])
    np.testing.assert_allclose(g, raw / raw.sum(), rtol=1e-12)


def test_centroid_bounds_checked():
    with pytest.raises(ValueError):
        cl([[64, 0]])


def test_empty_density_is_zero():
    assert not density_map(cl([])).any()


def test_interior_centroids_sum_to_count():
    y = density_map(cl([[20, 20], [30, 40], [45, 12]]))
    assert abs(y.sum() - 3.0) < 1e-4


def test_interior_kernel_placement():
    y = density_map(cl([[30, 31]]))
    g = gaussian_kernel(KernelSpec())
    np.testing.assert_allclose(y[20:41, 21:42], g)
    assert y[30, 31] == y.max()


def test_corner_centroid_renormalised():
    y = density_map(cl([[0, 0]]))
    # oracle: the clipped quarter of the kernel, divided by its own mass
    g = gaussian_kernel(KernelSpec())[10:, 10:]
    np.testing.assert_allclose(y[:11, :11], g / g.sum(), rtol=1e-12)
    assert abs(y.sum() - 1.0) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 39), st.integers(0, 47)), max_size=30),
       st.lists(st.tuples(st.integers(0, 39), st.integers(0, 47)), max_size=30))
def test_density_additive(a, b):
    dims = (40, 48)
    ya = density_map(cl(a, dims))
    yb = density_map(cl(b, dims))
    yab = density_map(cl(a + b, dims))
    np.testing.assert_allclose(yab, ya + yb, atol=1e-5)
    assert abs(yab.sum() - len(a) - len(b)) < 1e-4


def test_lrgt_shapes_128_patch():
    lr = make_lrgt(np.random.default_rng(0).random((128, 128)))
    assert [m.shape for m in lr] == [(16, 16), (32, 32), (64, 64)]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_lrgt_conserves_mass(seed):
    y = np.random.default_rng(seed).random((32, 56))
    for m in make_lrgt(y):
        assert abs(m.sum() - y.sum()) < 1e-4


def test_sum_pool_constant():
    np.testing.assert_array_equal(sum_pool(np.full((8, 8), 0.5), 2), np.full((4, 4), 2.0))


def test_lrgt_indivisible():
    with pytest.raises(ShapeError):
        make_lrgt(np.zeros((20, 16)))


def test_density_target_from_full():
    t = DensityTarget.from_full(density_map(cl([[5, 5], [40, 60]])))
    assert len(t.lr) == 3 and all(t.full.min() >= 0 for _ in t.lr)


def test_proximity_endpoints_and_midpoint():
    c = cl([[20, 20]])
    m = proximity_map(c, ProximitySpec(3.0, 15.0))
    assert m[20, 20] == 1.0
    assert m[20, 35] == 0.0          # D = d exactly
    assert m[20, 36] == 0.0          # beyond d
    assert m[20, 27] == pytest.approx((math.exp(3 * (1 - 7 / 15)) - 1) / (math.exp(3) - 1), abs=1e-12)
    # D/d = 1/2 (D = 7.5, d = 15 is off-grid; D = 15, d = 30 has the same ratio)
    m2 = proximity_map(c, ProximitySpec(3.0, 30.0))
    assert m2[20, 35] == pytest.approx((math.exp(1.5) - 1) / (math.exp(3) - 1), abs=1e-12)


def test_proximity_empty_raises():
    with pytest.raises(ValueError):
        proximity_map(cl([]))


@settings(max_examples=20, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 31), st.integers(0, 31)), min_size=1, max_size=8))
def test_proximity_range_and_monotone(points):
    c = cl(points, (32, 32))
    m = proximity_map(c)
    assert m.min() >= 0 and m.max() <= 1
    d = nearest_distance(c).ravel()
    order = np.argsort(d, kind="stable")
    assert np.all(np.diff(m.ravel()[order]) <= 1e-12)


def test_nearest_distance_brute_force():
    c = cl([[3, 4], [10, 1]], (12, 12))
    d = nearest_distance(c)
    for i in range(12):
        for j in range(12):
            assert d[i, j] == pytest.approx(min(math.hypot(i - 3, j - 4), math.hypot(i - 10, j - 1)))
