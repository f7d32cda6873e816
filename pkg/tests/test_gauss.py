"""Tests for Gaussian beliefs and tail/special functions."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chanceopt import gauss


class TestTailFunctions:
    def test_one_dim_matches_two_sided_normal(self):
        # P(|z| > R) = 2(1 - Phi(R)) for scalar standard normals.
        for r in [0.5, 1.0, 1.8964, 3.0]:
            assert gauss.tail_probability(1, r) == pytest.approx(
                2.0 * (1.0 - gauss.normal_cdf(r)), rel=1e-12
            )

    def test_known_values(self):
        # 95% two-sided interval in 1D and the quantile round trip.
        assert gauss.tail_probability(1, 1.959964) == pytest.approx(0.05, abs=1e-6)
        assert gauss.tail_radius(1, 0.05) == pytest.approx(1.959964, abs=1e-5)

    def test_radius_probability_roundtrip(self):
        for d in [1, 2, 6, 25]:
            for beta in [1e-3, 0.05, 0.3]:
                r = gauss.tail_radius(d, beta)
                assert gauss.tail_probability(d, r) == pytest.approx(beta, rel=1e-9)

    def test_radius_grows_with_dimension(self):
        radii = [gauss.tail_radius(d, 0.05) for d in range(1, 10)]
        assert all(a < b for a, b in zip(radii, radii[1:]))

    def test_edge_cases(self):
        assert gauss.tail_probability(3, 0.0) == 1.0
        assert gauss.tail_probability(3, -1.0) == 1.0
        with pytest.raises(ValueError):
            gauss.tail_radius(3, 0.0)
        with pytest.raises(ValueError):
            gauss.tail_radius(0, 0.5)

    @given(st.floats(min_value=1e-6, max_value=1 - 1e-6))
    @settings(max_examples=25, deadline=None)
    def test_normal_quantile_roundtrip(self, p):
        assert gauss.normal_cdf(gauss.normal_quantile(p)) == pytest.approx(p, rel=1e-9)


class TestRegIncBeta:
    def test_boundary_values(self):
        assert gauss.reg_inc_beta(2.0, 3.0, 0.0) == 0.0
        assert gauss.reg_inc_beta(2.0, 3.0, 1.0) == 1.0

    def test_symmetry(self):
        # I_x(a, b) = 1 - I_{1-x}(b, a)
        assert gauss.reg_inc_beta(2.5, 1.5, 0.3) == pytest.approx(
            1.0 - gauss.reg_inc_beta(1.5, 2.5, 0.7), rel=1e-12
        )

    def test_uniform_case(self):
        # I_x(1, 1) = x
        assert gauss.reg_inc_beta(1.0, 1.0, 0.42) == pytest.approx(0.42)

    def test_domain(self):
        with pytest.raises(ValueError):
            gauss.reg_inc_beta(1.0, 1.0, 1.5)


class TestMatrixHelpers:
    def test_cholesky_reconstructs(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((4, 4))
        spd = a @ a.T + 4 * np.eye(4)
        low = gauss.cholesky_lower(spd)
        np.testing.assert_allclose(np.triu(low, 1), 0.0)
        np.testing.assert_allclose(low @ low.T, spd, rtol=1e-12)

    def test_spectral_radius_sqrt(self):
        cov = np.diag([1.0, 9.0, 4.0])
        assert gauss.spectral_radius_sqrt(cov) == pytest.approx(3.0)

    def test_spectral_radius_dominates_any_direction(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((5, 5))
        cov = a @ a.T
        rho = gauss.spectral_radius_sqrt(cov)
        for _ in range(20):
            v = rng.standard_normal(5)
            v /= np.linalg.norm(v)
            assert np.sqrt(v @ cov @ v) <= rho + 1e-12


class TestMahalanobis:
    def test_identity_covariance(self):
        r = np.array([3.0, 4.0])
        assert gauss.mahalanobis_sq(r, np.eye(2)) == pytest.approx(25.0)

    def test_scaling(self):
        r = np.array([2.0, 0.0])
        cov = np.diag([4.0, 1.0])
        assert gauss.mahalanobis_sq(r, cov) == pytest.approx(1.0)

    def test_singular_in_range(self):
        # Residual within the range of a rank-1 covariance is finite.
        cov = np.outer([1.0, 1.0], [1.0, 1.0])
        assert gauss.mahalanobis_sq(np.array([1.0, 1.0]), cov) == pytest.approx(1.0)

    def test_singular_null_component(self):
        cov = np.diag([1.0, 0.0])
        assert gauss.mahalanobis_sq(np.array([0.5, 0.5]), cov) == float("inf")
        assert gauss.mahalanobis_sq(np.array([0.5, 0.0]), cov) == pytest.approx(0.25)


class TestGaussianBelief:
    def test_validation(self):
        with pytest.raises(ValueError):
            gauss.GaussianBelief(np.zeros(2), np.eye(3))
        with pytest.raises(ValueError):
            gauss.GaussianBelief(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))
        with pytest.raises(ValueError):
            gauss.GaussianBelief(np.zeros(2), -np.eye(2))

    def test_linear_map(self):
        b = gauss.GaussianBelief(np.array([1.0, 2.0]), np.diag([1.0, 4.0]))
        jac = np.array([[1.0, 1.0]])
        out = b.linear_map(jac, offset=np.array([0.5]), noise=np.array([[0.25]]))
        assert out.mean[0] == pytest.approx(3.5)
        assert out.cov[0, 0] == pytest.approx(5.25)

    def test_marginal(self):
        b = gauss.GaussianBelief(np.arange(3.0), np.diag([1.0, 2.0, 3.0]))
        m = b.marginal([0, 2])
        np.testing.assert_allclose(m.mean, [0.0, 2.0])
        np.testing.assert_allclose(m.cov, np.diag([1.0, 3.0]))

    def test_sampling_moments(self):
        rng = np.random.default_rng(2)
        cov = np.array([[2.0, 0.6], [0.6, 1.0]])
        b = gauss.GaussianBelief(np.array([1.0, -1.0]), cov)
        x = b.sample(rng, 200_000)
        np.testing.assert_allclose(x.mean(axis=0), b.mean, atol=0.02)
        np.testing.assert_allclose(np.cov(x.T), cov, atol=0.03)

    def test_sampling_singular(self):
        rng = np.random.default_rng(3)
        b = gauss.GaussianBelief(np.zeros(2), np.diag([1.0, 0.0]))
        x = b.sample(rng, 1000)
        assert np.all(x[:, 1] == 0.0)
