"""Tests for chance-constraint transcription and failure-risk estimators."""

import math

import numpy as np
import pytest

from chanceopt import transcribe as tr
from chanceopt.gauss import GaussianBelief, tail_probability, tail_radius


def norm_case():
    """Nearly saturated 3D control-norm constraint used as a benchmark."""
    u_mean = np.array([0.3, 0.37, -0.15])
    u_cov = (0.1 * np.eye(3) + 1e-3 * (np.ones((3, 3)) - np.eye(3))) * 1e-6
    return u_mean, u_cov, 0.5


def linearized_belief(u_mean, u_cov, u_max):
    h, a = tr.norm_to_linear(u_mean, u_max)
    return GaussianBelief(np.array([-a]), np.array([[h @ u_cov @ h]]))


class TestTranscribe:
    def test_two_dim_margins(self):
        cov = np.array([[1.0, -0.5], [-0.5, 10.0]]) * 1e-6
        belief = GaussianBelief(np.zeros(2), cov)
        beta = 0.05
        radius = tail_radius(2, beta)
        sr = tr.transcribe(tr.TranscriptionKind.SPECTRAL_RADIUS, belief, beta)
        fo = tr.transcribe(tr.TranscriptionKind.FIRST_ORDER, belief, beta)
        # Spectral margin uses one shared scale, close to the largest std.
        assert sr[0] == pytest.approx(sr[1])
        assert sr[0] / radius == pytest.approx(3.17e-3, rel=5e-3)
        assert fo[0] / radius == pytest.approx(1e-3, rel=1e-9)
        assert fo[1] / radius == pytest.approx(3.17e-3, rel=5e-3)
        # First-order is never more conservative.
        assert np.all(fo <= sr + 1e-15)

    def test_beta_one_collapses_to_mean(self):
        belief = GaussianBelief(np.array([-1.0, -2.0]), np.eye(2))
        for kind in tr.TranscriptionKind:
            np.testing.assert_allclose(tr.transcribe(kind, belief, 1.0), belief.mean)

    def test_one_dim_kinds_coincide(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            belief = GaussianBelief(rng.standard_normal(1), [[rng.uniform(0.1, 4.0)]])
            sr = tr.transcribe(tr.TranscriptionKind.SPECTRAL_RADIUS, belief, 0.07)
            fo = tr.transcribe(tr.TranscriptionKind.FIRST_ORDER, belief, 0.07)
            np.testing.assert_allclose(sr, fo, rtol=1e-13)

    def test_invalid_beta(self):
        belief = GaussianBelief(np.zeros(2), np.eye(2))
        with pytest.raises(ValueError):
            tr.transcribe(tr.TranscriptionKind.FIRST_ORDER, belief, 0.0)

    def test_soundness_via_monte_carlo(self):
        # Whenever the transcribed vector is <= 0, the satisfaction
        # probability must be at least 1 - beta (up to MC noise).
        rng = np.random.default_rng(1)
        beta, n = 0.1, 100_000
        for _ in range(5):
            dim = rng.integers(2, 6)
            a = rng.standard_normal((dim, dim))
            belief = GaussianBelief(-rng.uniform(0.5, 2.0, dim), 0.05 * a @ a.T)
            for kind in tr.TranscriptionKind:
                if np.all(tr.transcribe(kind, belief, beta) <= 0.0):
                    x = belief.sample(rng, n)
                    p = np.mean(np.all(x <= 0.0, axis=1))
                    ci = 3.0 * math.sqrt(beta * (1 - beta) / n)
                    assert p >= 1.0 - beta - ci


class TestNormRiskBenchmark:
    """Published comparison values for the nearly saturated norm case."""

    def test_exponential_bound(self):
        assert tr.risk_norm_exponential(*norm_case()).beta_T == pytest.approx(0.989, abs=5e-4)

    def test_tail_bound(self):
        assert tr.risk_norm_tail(*norm_case()).beta_T == pytest.approx(0.316, abs=1e-3)

    def test_variance_ratio_bound(self):
        u_mean, u_cov, u_max = norm_case()
        h, a = tr.norm_to_linear(u_mean, u_max)
        est = tr.risk_linear_variance_ratio(h, np.zeros(3), u_cov, a)
        assert est.beta_T == pytest.approx(0.217, abs=5e-4)

    def test_exact_linear(self):
        u_mean, u_cov, u_max = norm_case()
        h, a = tr.norm_to_linear(u_mean, u_max)
        est = tr.risk_linear_exact(h, np.zeros(3), u_cov, a)
        assert est.beta_T == pytest.approx(0.0289, abs=5e-5)

    def test_first_order_on_linearized(self):
        est = tr.risk_first_order(linearized_belief(*norm_case()))
        assert est.beta_T == pytest.approx(0.0577, abs=5e-5)

    def test_true_risk_by_monte_carlo(self):
        # Sampling the nonlinear norm itself: the real failure risk is 2.89%
        # and every closed-form estimate above upper-bounds it.
        u_mean, u_cov, u_max = norm_case()
        rng = np.random.Generator(np.random.Philox(key=7))
        du = rng.multivariate_normal(np.zeros(3), u_cov, size=1_000_000)
        beta_R = np.mean(np.linalg.norm(u_mean + du, axis=1) > u_max)
        assert beta_R == pytest.approx(0.0289, abs=5e-4)

    def test_dispatcher_matches_direct_calls(self):
        u_mean, u_cov, u_max = norm_case()
        kw = dict(u_mean=u_mean, u_cov=u_cov, u_max=u_max)
        assert tr.risk_estimate(tr.RiskMethod.RIDDERHOF, **kw).beta_T == (
            tr.risk_norm_exponential(u_mean, u_cov, u_max).beta_T
        )
        assert tr.risk_estimate(tr.RiskMethod.BLACKMORE, **kw).beta_T == pytest.approx(
            0.0289, abs=5e-5
        )
        belief = linearized_belief(u_mean, u_cov, u_max)
        assert tr.risk_estimate(tr.RiskMethod.FIRST_ORDER, belief=belief).beta_T == (
            tr.risk_first_order(belief).beta_T
        )


class TestNotApplicable:
    def test_exponential_bound_conditions(self):
        # Mean outside the ball: no bound.
        est = tr.risk_norm_exponential(np.array([1.0, 0.0, 0.0]), 1e-6 * np.eye(3), 0.5)
        assert not est.applicable
        # N_u > 2 needs enough slack relative to the covariance scale.
        est = tr.risk_norm_exponential(np.array([0.49, 0, 0]), 1e-4 * np.eye(3), 0.5)
        assert not est.applicable

    def test_tail_bound_needs_feasible_mean(self):
        assert not tr.risk_norm_tail(np.array([0.6, 0.0]), 1e-6 * np.eye(2), 0.5).applicable

    def test_vector_methods_need_nonpositive_mean(self):
        belief = GaussianBelief(np.array([0.1, -1.0]), np.eye(2))
        for m in (tr.risk_spectral, tr.risk_first_order, tr.risk_dth_order):
            assert not m(belief).applicable

    def test_exact_tail_limit(self):
        # Slack -> infinity drives the exact linear risk to zero.
        est = tr.risk_linear_exact(np.array([1.0]), np.array([0.0]), np.eye(1), 1e9)
        assert est.beta_T == pytest.approx(0.0, abs=1e-12)

    def test_estimate_validation(self):
        with pytest.raises(ValueError):
            tr.RiskEstimate(tr.RiskMethod.BLACKMORE, 1.5)


def random_feasible_belief(rng, dim, scale=1.0):
    a = rng.standard_normal((dim, dim))
    cov = a @ a.T + 0.1 * np.eye(dim)
    mean = -rng.uniform(0.2, 3.0, dim) * scale
    return GaussianBelief(mean, cov)


class TestDthOrder:
    def test_one_dim_equals_first_order(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            belief = GaussianBelief(-rng.uniform(0.1, 3.0, 1), [[rng.uniform(0.1, 4.0)]])
            d1 = tr.risk_dth_order(belief).beta_T
            fo = tr.risk_first_order(belief).beta_T
            assert abs(d1 - fo) < 1e-14

    def test_large_slack_limit(self):
        belief = GaussianBelief(-1e6 * np.ones(4), np.eye(4))
        assert tr.risk_dth_order(belief).beta_T == pytest.approx(0.0, abs=1e-12)

    def test_five_dim_sandwich(self):
        # beta_R <= beta_T,d <= beta_T,1 on a random 5D instance.
        rng = np.random.default_rng(3)
        belief = random_feasible_belief(rng, 5)
        dth = tr.risk_dth_order(belief).beta_T
        fo = tr.risk_first_order(belief).beta_T
        mc = tr.risk_monte_carlo(belief, n_samples=1_000_000, seed=11).beta_T
        ci = 3.0 * math.sqrt(mc * (1 - mc) / 1_000_000 + 1e-12)
        assert dth <= fo
        assert dth >= mc - ci

    def test_ties_handled_without_special_casing(self):
        # Identical slacks collapse the shells; the result is still a
        # probability and still below the first-order value.
        belief = GaussianBelief(-np.ones(3), np.eye(3))
        dth = tr.risk_dth_order(belief).beta_T
        fo = tr.risk_first_order(belief).beta_T
        assert 0.0 <= dth <= fo

    def test_deterministic_components_dropped(self):
        # A zero-variance strictly feasible component cannot fail.
        belief = GaussianBelief(np.array([-1.0, -0.5]), np.diag([0.0, 1.0]))
        est = tr.risk_dth_order(belief)
        assert est.applicable
        assert 0.0 <= est.beta_T <= 1.0

    def test_hierarchy_random_instances(self):
        rng = np.random.default_rng(4)
        for _ in range(40):
            dim = int(rng.integers(1, 26))
            belief = random_feasible_belief(rng, dim)
            sp = tr.risk_spectral(belief).beta_T
            fo = tr.risk_first_order(belief).beta_T
            dth = tr.risk_dth_order(belief).beta_T
            assert sp >= fo >= dth

    def test_upper_bounds_monte_carlo(self):
        rng = np.random.default_rng(5)
        n = 100_000
        for _ in range(10):
            dim = int(rng.integers(2, 10))
            belief = random_feasible_belief(rng, dim)
            dth = tr.risk_dth_order(belief).beta_T
            mc = tr.risk_monte_carlo(belief, n_samples=n, seed=int(rng.integers(1 << 30))).beta_T
            ci = 3.0 * math.sqrt(max(mc * (1 - mc), 1e-8) / n)
            assert dth >= mc - ci

    def test_ratio_validation(self):
        with pytest.raises(ValueError):
            tr.dth_order_risk_from_ratios(np.array([-1.0, 2.0]))


class TestSmallCovarianceComparison:
    def test_first_order_margin_below_tail_bound_margin(self):
        # For norm constraints in the small-covariance regime the linearized
        # first-order margin is bounded by the chi-squared tail margin.
        rng = np.random.default_rng(6)
        beta = 0.05
        for _ in range(25):
            n = int(rng.integers(2, 6))
            u_mean = rng.standard_normal(n)
            u_mean *= rng.uniform(0.3, 1.0) / np.linalg.norm(u_mean)
            a = rng.standard_normal((n, n))
            u_cov = 1e-8 * (a @ a.T + 0.1 * np.eye(n))
            h, _ = tr.norm_to_linear(u_mean, 1.0)
            fo_margin = tail_radius(1, beta) * math.sqrt(h @ u_cov @ h)
            tail_margin = tail_radius(n, beta) * math.sqrt(
                np.max(np.linalg.eigvalsh(u_cov))
            )
            assert fo_margin <= tail_margin + 1e-18


class TestConservatism:
    def test_identity(self):
        assert tr.conservatism(0.1, 0.1) == pytest.approx(1.0)

    def test_published_values(self):
        assert tr.conservatism(0.0577, 0.0289) == pytest.approx(1.999, abs=2e-3)
        assert tr.conservatism(0.316, 0.0289) == pytest.approx(11.53, abs=2e-2)

    def test_monotone_in_beta_T(self):
        vals = [tr.conservatism(b, 0.02) for b in np.linspace(0.02, 0.99, 30)]
        assert all(a < b for a, b in zip(vals, vals[1:]))

    def test_certain_failure_marker(self):
        assert tr.conservatism(1.0, 0.5) == math.inf

    def test_domain(self):
        with pytest.raises(ValueError):
            tr.conservatism(0.5, 0.0)
        with pytest.raises(ValueError):
            tr.conservatism(0.0, 0.5)


class TestMonteCarloEstimator:
    def test_bit_reproducible(self):
        belief = GaussianBelief(-np.ones(3), np.eye(3))
        a = tr.risk_monte_carlo(belief, n_samples=20_000, seed=42).beta_T
        b = tr.risk_monte_carlo(belief, n_samples=20_000, seed=42).beta_T
        assert a == b

    def test_matches_analytic_independent_case(self):
        # Independent components: P(all <= 0) factorizes.
        belief = GaussianBelief(np.array([-1.0, -2.0]), np.eye(2))
        from chanceopt.gauss import normal_cdf

        exact = 1.0 - normal_cdf(1.0) * normal_cdf(2.0)
        mc = tr.risk_monte_carlo(belief, n_samples=500_000, seed=3).beta_T
        assert mc == pytest.approx(exact, abs=2e-3)
