"""Poincare-ball primitives against closed forms and metric properties."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hgch import geometry as geo

finite = st.floats(-3.0, 3.0, allow_nan=False)
curvatures = st.floats(0.1, 10.0)


def random_ball(rng, n, d, k=1.0, max_frac=0.95):
    """Uniform directions, radii up to ``max_frac`` of the boundary."""
    v = rng.normal(size=(n, d))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * rng.uniform(0, max_frac, size=(n, 1)) * np.sqrt(k)


class TestDistance:
    def test_origin_to_origin(self):
        assert geo.dist(np.zeros(2), np.zeros(2)) == 0.0

    def test_symmetric_pair(self):
        d = geo.dist([0.5, 0.0], [-0.5, 0.0], k=1.0)
        assert abs(d - np.log(9.0)) < 1e-9
        assert abs(d - 4 * np.arctanh(0.5)) < 1e-9

    def test_symmetry(self):
        rng = np.random.default_rng(0)
        x, y = random_ball(rng, 100, 5), random_ball(rng, 100, 5)
        np.testing.assert_array_equal(geo.dist(x, y), geo.dist(y, x))

    def test_triangle_inequality(self):
        rng = np.random.default_rng(1)
        x, y, z = (random_ball(rng, 1000, 3, k=2.0) for _ in range(3))
        dxz = geo.dist(x, z, 2.0)
        assert np.all(dxz <= geo.dist(x, y, 2.0) + geo.dist(y, z, 2.0) + 1e-9)

    def test_identity_of_indiscernibles(self):
        rng = np.random.default_rng(2)
        x = random_ball(rng, 50, 4)
        np.testing.assert_array_equal(geo.dist(x, x), 0.0)
        assert np.all(geo.dist(x, x[::-1])[x.shape[0] // 2 + 1:] > 0)

    def test_small_separation_is_accurate(self):
        # the naive arccosh(1 + z) loses all digits here
        x = np.array([0.3, 0.0])
        y = x + np.array([1e-9, 0.0])
        expected = 2 * 1e-9 / (1 - 0.09)
        np.testing.assert_allclose(geo.dist(x, y), expected, rtol=1e-6)

    @given(k=curvatures, seed=st.integers(0, 2**16))
    def test_scale_consistency(self, k, seed):
        rng = np.random.default_rng(seed)
        x, y = random_ball(rng, 10, 3, k), random_ball(rng, 10, 3, k)
        lhs = geo.dist(x, y, k)
        rhs = np.sqrt(k) * geo.dist(x / np.sqrt(k), y / np.sqrt(k), 1.0)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-9)

    def test_sqdist(self):
        np.testing.assert_allclose(geo.sqdist([0.5, 0.0], [-0.5, 0.0]), np.log(9.0) ** 2)

    def test_outside_ball_rejected(self):
        with pytest.raises(ValueError):
            geo.dist([1.0, 0.0], [0.0, 0.0], k=1.0)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError):
            geo.dist([0.1, 0.0], [0.1, 0.0, 0.0])

    @pytest.mark.parametrize("k", [0.0, -1.0, np.inf, np.nan])
    def test_bad_curvature_rejected(self, k):
        with pytest.raises(ValueError):
            geo.dist([0.0], [0.0], k=k)


class TestMaps:
    def test_exp_zero(self):
        np.testing.assert_array_equal(geo.exp_o(np.zeros(3)), np.zeros(3))

    def test_exp_value(self):
        np.testing.assert_allclose(geo.exp_o([0.5, 0.0]), [np.tanh(0.5), 0.0], rtol=0, atol=1e-15)

    def test_log_zero(self):
        np.testing.assert_array_equal(geo.log_o(np.zeros(3)), np.zeros(3))

    def test_log_value(self):
        np.testing.assert_allclose(geo.log_o([0.462117, 0.0]), [0.5, 0.0], atol=1e-6)

    def test_roundtrip_example(self):
        v = np.array([0.3, -0.7])
        assert np.max(np.abs(geo.log_o(geo.exp_o(v)) - v)) < 1e-12

    @given(v=arrays(np.float64, 4, elements=finite), k=curvatures)
    def test_roundtrip(self, v, k):
        # the roundtrip is exact as long as the image stays off the boundary clip
        v = v * min(1.0, 3.0 / max(np.linalg.norm(v), 1e-300))
        if np.linalg.norm(v) / np.sqrt(k) > 5.0:
            v = v * 5.0 * np.sqrt(k) / np.linalg.norm(v)
        np.testing.assert_allclose(geo.log_o(geo.exp_o(v, k), k), v, rtol=0, atol=1e-9)

    def test_exp_stays_inside(self):
        rng = np.random.default_rng(3)
        v = rng.normal(size=(500, 4))
        v *= rng.uniform(0, 20, size=(500, 1)) / np.linalg.norm(v, axis=1, keepdims=True)
        for k in (0.5, 1.0, 4.0):
            assert np.all(np.linalg.norm(geo.exp_o(v, k), axis=1) < np.sqrt(k))

    def test_large_vectors_clipped_to_margin(self):
        y = geo.exp_o([1e6, 0.0])
        assert y[0] <= 1 - 1e-5 + 1e-15
        assert np.isfinite(geo.log_o(y)).all()

    def test_log_rejects_outside(self):
        with pytest.raises(ValueError):
            geo.log_o([0.8, 0.8])


class TestMobiusAndConformal:
    def test_unit_scalar(self):
        y = np.array([0.2, -0.4, 0.1])
        np.testing.assert_allclose(geo.mobius_scalar(1.0, y), y, rtol=1e-14)

    def test_origin_fixed(self):
        np.testing.assert_array_equal(geo.mobius_scalar(3.7, np.zeros(2)), np.zeros(2))

    def test_half(self):
        np.testing.assert_allclose(geo.mobius_scalar(0.5, [np.tanh(1.0), 0.0]), [np.tanh(0.5), 0.0], atol=1e-15)

    def test_conformal_origin(self):
        assert geo.conformal_factor(np.zeros(2)) == 2.0

    def test_conformal_value(self):
        np.testing.assert_allclose(geo.conformal_factor([0.5, 0.0]), 2 / 0.75)

    @given(r=st.lists(st.floats(0.0, 0.99), min_size=2, max_size=20, unique=True), k=curvatures)
    def test_conformal_strictly_increasing(self, r, k):
        r = np.sort(np.asarray(r)) * np.sqrt(k)
        x = np.stack([r, np.zeros_like(r)], axis=1)
        lam = geo.conformal_factor(x, k)
        assert np.all(lam >= 2.0)
        # radii closer than float resolution of r^2 cannot be told apart
        resolved = np.diff(r) > 1e-7
        assert np.all(np.diff(lam)[resolved] > 0)


class TestGyromidpoint:
    def test_single_point(self):
        x = np.array([[0.3, -0.5]])
        assert np.max(np.abs(geo.gyromidpoint(x) - x[0])) < 1e-12

    def test_antipodal(self):
        x = np.array([0.3, -0.5])
        assert np.max(np.abs(geo.gyromidpoint(np.stack([x, -x])))) < 1e-12

    def test_equidistance(self):
        rng = np.random.default_rng(4)
        for k in (1.0, 2.5):
            for x, y in zip(random_ball(rng, 100, 3, k), random_ball(rng, 100, 3, k)):
                m = geo.gyromidpoint(np.stack([x, y]), k=k)
                assert abs(geo.dist(m, x, k) - geo.dist(m, y, k)) < 1e-9

    def test_midpoint_on_diameter(self):
        # on a diameter the midpoint is where both distances equal half the gap
        x, y = np.array([0.5, 0.0]), np.array([-0.2, 0.0])
        m = geo.gyromidpoint(np.stack([x, y]))
        np.testing.assert_allclose(geo.dist(m, x), geo.dist(x, y) / 2, rtol=1e-12)
        assert abs(m[1]) < 1e-15

    def test_permutation_invariant(self):
        rng = np.random.default_rng(5)
        x = random_ball(rng, 7, 3)
        w = rng.uniform(0.1, 2.0, size=7)
        p = rng.permutation(7)
        np.testing.assert_allclose(geo.gyromidpoint(x, w), geo.gyromidpoint(x[p], w[p]), rtol=1e-12, atol=1e-15)

    def test_containment_large_batch(self):
        rng = np.random.default_rng(6)
        x = random_ball(rng, 10_000, 4, k=1.0, max_frac=1.0)
        x = geo.project(x, 1.0)
        m = geo.gyromidpoint(x)
        assert np.linalg.norm(m) < 1.0
        # all points pushed to the boundary in one direction stay inside too
        edge = np.tile([1 - 1e-5, 0.0, 0.0, 0.0], (10_000, 1))
        assert np.linalg.norm(geo.gyromidpoint(edge)) < 1.0

    def test_euclidean_limit(self):
        # for points near the origin the midpoint approaches the weighted mean
        x = np.array([[1e-6, 0.0], [0.0, 2e-6]])
        np.testing.assert_allclose(geo.gyromidpoint(x, [1.0, 3.0]), [0.25e-6, 1.5e-6], rtol=1e-6)

    @given(seed=st.integers(0, 2**16), k=curvatures)
    @settings(max_examples=50)
    def test_coefficient_grows_with_norm(self, seed, k):
        # the unnormalised weight of a point grows with its distance from the origin
        rng = np.random.default_rng(seed)
        x = random_ball(rng, 30, 3, k, max_frac=0.999)
        order = np.argsort(np.linalg.norm(x, axis=1))
        coef = 1.0 * geo.conformal_factor(x[order], k)
        r = np.linalg.norm(x[order], axis=1)
        strict = np.diff(r) > 1e-12
        assert np.all(np.diff(coef)[strict] > 0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            geo.gyromidpoint(np.zeros((0, 2)))

    @pytest.mark.parametrize("w", [[1.0, 0.0], [1.0, -1.0], [1.0]])
    def test_bad_weights_rejected(self, w):
        with pytest.raises(ValueError):
            geo.gyromidpoint(np.zeros((2, 2)), w)

    def test_point_outside_rejected(self):
        with pytest.raises(ValueError):
            geo.gyromidpoint([[2.0, 0.0]])


class TestStableHelpers:
    def test_arcosh1p_matches_arccosh(self):
        z = np.logspace(-3, 3, 50)
        np.testing.assert_allclose(geo.arcosh1p(z), np.arccosh(1 + z), rtol=1e-12)

    def test_arcosh1p_small(self):
        # arcosh(1+z) ~ sqrt(2z) for tiny z
        np.testing.assert_allclose(geo.arcosh1p(1e-20), np.sqrt(2e-20), rtol=1e-9)

    def test_project(self):
        x = geo.project(np.array([[3.0, 4.0], [0.1, 0.0]]), 4.0)
        np.testing.assert_allclose(np.linalg.norm(x[0]), 2 * (1 - 1e-5))
        np.testing.assert_array_equal(x[1], [0.1, 0.0])
