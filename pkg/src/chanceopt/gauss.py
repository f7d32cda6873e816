"""Gaussian beliefs and the special functions used by chance constraints.

The key quantity throughout is the tail mass of a standard multivariate
normal outside a centered ball:

    tail_probability(d, R) = P(||z|| > R),  z ~ N(0, I_d)

and its inverse ``tail_radius``.  Both reduce to the chi-squared
distribution with d degrees of freedom evaluated at R^2.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats


def tail_probability(d: int, radius: float) -> float:
    """P(||z|| > radius) for z ~ N(0, I_d); 1.0 for radius <= 0."""
    if d < 1:
        raise ValueError(f"dimension must be >= 1, got {d}")
    if radius <= 0.0:
        return 1.0
    return float(stats.chi2.sf(radius**2, df=d))


def tail_radius(d: int, beta: float) -> float:
    """Radius R with P(||z|| > R) = beta for z ~ N(0, I_d)."""
    if d < 1:
        raise ValueError(f"dimension must be >= 1, got {d}")
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta}")
    return float(np.sqrt(stats.chi2.isf(beta, df=d)))


def normal_cdf(x: float) -> float:
    return float(special.ndtr(x))


def normal_quantile(p: float) -> float:
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must lie in (0, 1), got {p}")
    return float(special.ndtri(p))


def reg_inc_beta(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [0, 1], got {x}")
    return float(special.betainc(a, b, x))


def cholesky_lower(mat: np.ndarray) -> np.ndarray:
    """Lower-triangular Cholesky factor of a symmetric positive-definite matrix."""
    return np.linalg.cholesky(np.asarray(mat, dtype=float))


def spectral_radius_sqrt(cov: np.ndarray) -> float:
    """Square root of the largest eigenvalue of a symmetric PSD matrix."""
    cov = np.asarray(cov, dtype=float)
    lam = float(np.linalg.eigvalsh(cov)[-1])
    return float(np.sqrt(max(lam, 0.0)))


def mahalanobis_sq(residual: np.ndarray, cov: np.ndarray, rtol: float = 1e-12) -> float:
    """Squared Mahalanobis distance, tolerant of singular covariances.

    Uses the eigendecomposition pseudo-inverse.  If the residual has a
    component in the null space of ``cov`` the distance is infinite (the
    point is unreachable under that covariance).
    """
    residual = np.asarray(residual, dtype=float)
    cov = np.asarray(cov, dtype=float)
    lam, vecs = np.linalg.eigh(cov)
    tol = rtol * max(lam[-1], 0.0) + 1e-300
    proj = vecs.T @ residual
    null = lam <= tol
    if null.any() and np.any(np.abs(proj[null]) > np.sqrt(tol) * (1.0 + np.abs(proj).max())):
        return float("inf")
    live = ~null
    if not live.any():
        return 0.0
    return float(np.sum(proj[live] ** 2 / lam[live]))


def _symmetrize(mat: np.ndarray) -> np.ndarray:
    return 0.5 * (mat + mat.T)


@dataclass
class GaussianBelief:
    """A multivariate normal with mean ``mean`` and covariance ``cov``."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        n = self.mean.shape[0]
        if self.cov.shape != (n, n):
            raise ValueError(f"covariance shape {self.cov.shape} does not match mean dim {n}")
        if not np.allclose(self.cov, self.cov.T, atol=1e-10 * (1.0 + np.abs(self.cov).max())):
            raise ValueError("covariance must be symmetric")
        if np.linalg.eigvalsh(_symmetrize(self.cov))[0] < -1e-10 * (1.0 + np.abs(self.cov).max()):
            raise ValueError("covariance must be positive semidefinite")
        self.cov = _symmetrize(self.cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def linear_map(self, jac: np.ndarray, offset: np.ndarray | None = None,
                   noise: np.ndarray | None = None) -> "GaussianBelief":
        """Push the belief through y = jac @ x + offset, adding ``noise`` covariance."""
        jac = np.atleast_2d(np.asarray(jac, dtype=float))
        mean = jac @ self.mean
        if offset is not None:
            mean = mean + np.asarray(offset, dtype=float)
        cov = jac @ self.cov @ jac.T
        if noise is not None:
            cov = cov + np.asarray(noise, dtype=float)
        return GaussianBelief(mean, _symmetrize(cov))

    def marginal(self, idx) -> "GaussianBelief":
        idx = np.asarray(idx, dtype=int)
        return GaussianBelief(self.mean[idx], self.cov[np.ix_(idx, idx)])

    def mahalanobis_sq(self, point: np.ndarray) -> float:
        return mahalanobis_sq(np.asarray(point, dtype=float) - self.mean, self.cov)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Draw n samples, shape (n, dim); handles singular covariances."""
        lam, vecs = np.linalg.eigh(self.cov)
        lam = np.clip(lam, 0.0, None)
        half = vecs * np.sqrt(lam)
        return self.mean + rng.standard_normal((n, self.dim)) @ half.T
