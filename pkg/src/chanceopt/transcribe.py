"""Deterministic transcription of multidimensional Gaussian chance constraints.

Given y ~ N(ybar, Sigma_y) and a risk budget beta, a transcription produces a
deterministic vector whose nonpositivity is sufficient for
P(y <= 0 componentwise) >= 1 - beta.  The module also provides the matching
family of closed-form failure-risk estimators (upper bounds on the true risk
of a fixed Gaussian), a sharper d-th-order estimator built from nested-ball
geometry, a Monte Carlo reference estimator, and a conservatism metric to
compare them.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .gauss import (
    GaussianBelief,
    normal_cdf,
    reg_inc_beta,
    spectral_radius_sqrt,
    tail_probability,
    tail_radius,
)


class TranscriptionKind(enum.Enum):
    """Which deterministic margin to apply to a Gaussian constraint vector."""

    SPECTRAL_RADIUS = "spectral_radius"
    FIRST_ORDER = "first_order"


class RiskMethod(enum.Enum):
    RIDDERHOF = "ridderhof"
    OGURI_LANTOINE = "oguri_lantoine"
    NAKKA_CHUNG = "nakka_chung"
    BLACKMORE = "blackmore"
    SPECTRAL = "spectral"
    FIRST_ORDER = "first_order"
    DTH_ORDER = "dth_order"
    MONTE_CARLO = "monte_carlo"


@dataclass(frozen=True)
class RiskEstimate:
    """A failure-risk value from one estimator.

    ``beta_T`` is None when the estimator's applicability condition fails
    (the method then provides no bound at all).
    """

    method: RiskMethod
    beta_T: float | None
    conservatism: float | None = None

    def __post_init__(self):
        if self.beta_T is not None and not 0.0 <= self.beta_T <= 1.0:
            raise ValueError(f"risk estimate {self.beta_T} outside [0, 1]")

    @property
    def applicable(self) -> bool:
        return self.beta_T is not None


def transcribe(kind: TranscriptionKind, belief: GaussianBelief, beta: float) -> np.ndarray:
    """Deterministic sufficient condition vector for P(y <= 0) >= 1 - beta.

    SPECTRAL_RADIUS inflates every component by the same scalar margin
    (the radius times the square root of the covariance spectral radius);
    FIRST_ORDER uses the per-component standard deviations, which is never
    more conservative.
    """
    if not 0.0 < beta <= 1.0:
        raise ValueError(f"beta must lie in (0, 1], got {beta}")
    radius = 0.0 if beta == 1.0 else tail_radius(belief.dim, beta)
    if kind is TranscriptionKind.SPECTRAL_RADIUS:
        margin = radius * spectral_radius_sqrt(belief.cov)
        return belief.mean + margin
    if kind is TranscriptionKind.FIRST_ORDER:
        sigma = np.sqrt(np.clip(np.diag(belief.cov), 0.0, None))
        return belief.mean + radius * sigma
    raise ValueError(f"unknown transcription kind {kind!r}")


# -- closed-form risk estimators -----------------------------------------------


def _not_applicable(method: RiskMethod) -> RiskEstimate:
    return RiskEstimate(method, None)


def norm_to_linear(u_mean: np.ndarray, u_max: float) -> tuple[np.ndarray, float]:
    """Linearize the norm constraint ||u|| <= u_max about the mean.

    Returns (h, a) such that h^T du <= a approximates the constraint for the
    deviation du = u - u_mean (small-covariance regime): h = u_mean/||u_mean||
    pointing along the constraint gradient, a = u_max - ||u_mean||.
    """
    u_mean = np.asarray(u_mean, dtype=float)
    nrm = float(np.linalg.norm(u_mean))
    if nrm == 0.0:
        raise ValueError("norm linearization undefined at zero mean control")
    return u_mean / nrm, u_max - nrm


def risk_norm_exponential(u_mean, u_cov, u_max) -> RiskEstimate:
    """Exponential concentration bound for P(||u|| > u_max)."""
    u_mean = np.asarray(u_mean, dtype=float)
    n = u_mean.shape[0]
    rho = spectral_radius_sqrt(u_cov)
    t = (float(np.linalg.norm(u_mean)) - u_max) / rho
    method = RiskMethod.RIDDERHOF
    if t > 0.0:
        return _not_applicable(method)
    if n <= 2:
        return RiskEstimate(method, min(1.0, math.exp(-0.5 * t * t)))
    if t + math.sqrt(n) > 0.0:
        return _not_applicable(method)
    return RiskEstimate(method, min(1.0, math.exp(-0.5 * (t + math.sqrt(n)) ** 2)))


def risk_norm_tail(u_mean, u_cov, u_max) -> RiskEstimate:
    """Chi-squared tail bound for P(||u|| > u_max)."""
    u_mean = np.asarray(u_mean, dtype=float)
    rho = spectral_radius_sqrt(u_cov)
    slack = u_max - float(np.linalg.norm(u_mean))
    if slack < 0.0:
        return _not_applicable(RiskMethod.OGURI_LANTOINE)
    return RiskEstimate(
        RiskMethod.OGURI_LANTOINE, tail_probability(u_mean.shape[0], slack / rho)
    )


def risk_linear_variance_ratio(h, z_mean, z_cov, a) -> RiskEstimate:
    """Cantelli-type bound for P(h^T z > a): s^2 / (s^2 + slack^2)."""
    h = np.asarray(h, dtype=float)
    var = float(h @ np.asarray(z_cov, dtype=float) @ h)
    slack = float(a) - float(h @ np.asarray(z_mean, dtype=float))
    if slack < 0.0:
        return _not_applicable(RiskMethod.NAKKA_CHUNG)
    return RiskEstimate(RiskMethod.NAKKA_CHUNG, var / (var + slack**2))


def risk_linear_exact(h, z_mean, z_cov, a) -> RiskEstimate:
    """Exact Gaussian value of P(h^T z > a) (one-dimensional projection)."""
    h = np.asarray(h, dtype=float)
    sd = math.sqrt(float(h @ np.asarray(z_cov, dtype=float) @ h))
    slack = float(a) - float(h @ np.asarray(z_mean, dtype=float))
    return RiskEstimate(RiskMethod.BLACKMORE, 1.0 - normal_cdf(slack / sd))


def _feasibility_ratios(belief: GaussianBelief) -> np.ndarray:
    """r_i = -ybar_i / sigma_i, the per-component standardized slack."""
    mean, cov = belief.mean, belief.cov
    if np.any(mean > 0.0):
        raise ValueError("risk estimators require a componentwise nonpositive mean")
    sigma = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(sigma > 0.0, -mean / sigma, np.where(mean < 0.0, np.inf, 0.0))
    return r


def risk_spectral(belief: GaussianBelief) -> RiskEstimate:
    """Tail of the smallest slack over the spectral-radius scale."""
    if np.any(belief.mean > 0.0):
        return _not_applicable(RiskMethod.SPECTRAL)
    rho = spectral_radius_sqrt(belief.cov)
    r = float(np.min(-belief.mean)) / rho
    return RiskEstimate(RiskMethod.SPECTRAL, tail_probability(belief.dim, r))


def risk_first_order(belief: GaussianBelief) -> RiskEstimate:
    if np.any(belief.mean > 0.0):
        return _not_applicable(RiskMethod.FIRST_ORDER)
    r = _feasibility_ratios(belief)
    return RiskEstimate(RiskMethod.FIRST_ORDER, tail_probability(belief.dim, float(np.min(r))))


def dth_order_risk_from_ratios(r: np.ndarray, d: int | None = None) -> float:
    """d-th-order failure-risk upper bound from standardized slabs.

    ``r`` holds the distances of the d feasibility hyperplanes from the mean
    in whitened coordinates.  The bound accumulates probability shells
    between consecutive sorted radii and discounts each shell by the sphere
    fraction already cut away by closer hyperplanes (a spherical-sector
    correction through the regularized incomplete beta function).
    """
    r = np.sort(np.asarray(r, dtype=float))
    d = r.shape[0] if d is None else d
    if np.any(r < 0.0):
        raise ValueError("standardized slacks must be nonnegative")
    kept = 0.0
    prev = 0.0
    for i in range(r.shape[0]):
        ri = r[i]
        if ri <= prev:  # zero-width shell (ties or r_i = 0)
            continue
        shell = tail_probability(d, prev) - tail_probability(d, ri)
        cut = 0.0
        for j in range(i):
            t = min(r[j] / ri, 1.0)
            cut += reg_inc_beta((d - 1) / 2.0, 0.5, math.sqrt(max(0.0, 1.0 - t * t)))
        kept += shell * max(0.0, 1.0 - 0.5 * cut)
        prev = ri
    return min(1.0, max(0.0, 1.0 - kept))


def risk_dth_order(belief: GaussianBelief) -> RiskEstimate:
    if np.any(belief.mean > 0.0):
        return _not_applicable(RiskMethod.DTH_ORDER)
    r = _feasibility_ratios(belief)
    finite = np.isfinite(r)
    if not finite.all():
        # Deterministically satisfied components never cut the ball; drop
        # them but keep the ambient dimension.
        r = r[finite]
        if r.size == 0:
            return RiskEstimate(RiskMethod.DTH_ORDER, 0.0)
        return RiskEstimate(
            RiskMethod.DTH_ORDER, dth_order_risk_from_ratios(r, d=belief.dim)
        )
    return RiskEstimate(RiskMethod.DTH_ORDER, dth_order_risk_from_ratios(r))


def risk_monte_carlo(
    belief: GaussianBelief, n_samples: int = 100_000, seed: int = 0
) -> RiskEstimate:
    """Empirical P(any y_i > 0) with a counter-based reproducible RNG."""
    rng = np.random.Generator(np.random.Philox(key=seed))
    samples = belief.sample(rng, n_samples)
    failures = np.any(samples > 0.0, axis=1)
    return RiskEstimate(RiskMethod.MONTE_CARLO, float(failures.mean()))


_NORM_METHODS = {
    RiskMethod.RIDDERHOF: risk_norm_exponential,
    RiskMethod.OGURI_LANTOINE: risk_norm_tail,
}
_LINEAR_METHODS = {
    RiskMethod.NAKKA_CHUNG: risk_linear_variance_ratio,
    RiskMethod.BLACKMORE: risk_linear_exact,
}
_VECTOR_METHODS = {
    RiskMethod.SPECTRAL: risk_spectral,
    RiskMethod.FIRST_ORDER: risk_first_order,
    RiskMethod.DTH_ORDER: risk_dth_order,
}


def risk_estimate(method: RiskMethod, **inputs) -> RiskEstimate:
    """Dispatch to one estimator by method name.

    Norm methods take (u_mean, u_cov, u_max).  Linear methods take either
    (h, z_mean, z_cov, a) or the norm inputs, which are linearized first.
    Vector methods and MONTE_CARLO take belief (plus n_samples/seed).
    """
    if method in _NORM_METHODS:
        return _NORM_METHODS[method](inputs["u_mean"], inputs["u_cov"], inputs["u_max"])
    if method in _LINEAR_METHODS:
        if "h" not in inputs:
            h, a = norm_to_linear(inputs["u_mean"], inputs["u_max"])
            return _LINEAR_METHODS[method](h, np.zeros_like(h), inputs["u_cov"], a)
        return _LINEAR_METHODS[method](
            inputs["h"], inputs["z_mean"], inputs["z_cov"], inputs["a"]
        )
    if method in _VECTOR_METHODS:
        return _VECTOR_METHODS[method](inputs["belief"])
    if method is RiskMethod.MONTE_CARLO:
        return risk_monte_carlo(
            inputs["belief"],
            n_samples=inputs.get("n_samples", 100_000),
            seed=inputs.get("seed", 0),
        )
    raise ValueError(f"unknown risk method {method!r}")


def conservatism(beta_T: float, beta_R: float) -> float:
    """How much an estimate beta_T overshoots the true risk beta_R (1 = exact)."""
    if not 0.0 < beta_R < 1.0:
        raise ValueError(f"beta_R must lie in (0, 1), got {beta_R}")
    if not 0.0 < beta_T <= 1.0:
        raise ValueError(f"beta_T must lie in (0, 1], got {beta_T}")
    if beta_T == 1.0:
        return math.inf
    return (beta_T / beta_R) * math.sqrt((1.0 - beta_R**2) / (1.0 - beta_T**2))
