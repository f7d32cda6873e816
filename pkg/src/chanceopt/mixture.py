"""Gaussian-mixture splitting and nonlinearity-driven adaptive decomposition.

A Gaussian belief pushed through a nonlinear map stops being Gaussian.  The
strategy here is to measure the local nonlinearity of the map over the
belief's support (the NLI, a ratio of second- to first-order Taylor
coefficient mass in whitened coordinates) and, when it is too large, replace
the belief by a three-component Gaussian mixture that closely matches it but
whose components each cover a smaller region, over which the map is more
nearly linear.  Applied recursively this yields an adaptive decomposition
whose every component can be propagated by plain linearization.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .dapoly import PolyVector
from .gauss import GaussianBelief, cholesky_lower

# Optimal three-component split of a standard normal (minimum L2 density
# distance subject to symmetric weights and equal component variances).
SPLIT_ALPHA = 0.5495506294920584
SPLIT_MU = 1.0575150485760967
SPLIT_SIGMA = 0.6715664864669252


@dataclass(frozen=True)
class SplitLibrary:
    """Univariate three-component split constants."""

    alpha: float = SPLIT_ALPHA
    mu_bar: float = SPLIT_MU
    sigma: float = SPLIT_SIGMA

    @property
    def weights(self) -> tuple[float, float, float]:
        side = (1.0 - self.alpha) / 2.0
        return (self.alpha, side, side)


@dataclass
class GaussianMixture:
    """A finite Gaussian mixture with a record of how it was produced.

    ``genealogy[i]`` lists the (split-direction, branch) pairs that produced
    component i from the root belief; branch is -1/0/+1 for the lower,
    central, and upper child.
    """

    weights: np.ndarray
    components: list[GaussianBelief]
    genealogy: list[list[tuple[int, int]]] = field(default_factory=list)
    # For decompositions of a mapped belief: the pre-map input component
    # matching each output component (None otherwise).
    inputs: list[GaussianBelief] | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (len(self.components),):
            raise ValueError("one weight per component required")
        if np.any(self.weights <= 0.0):
            raise ValueError("weights must be positive")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {self.weights.sum()}, expected 1")
        dims = {c.dim for c in self.components}
        if len(dims) != 1:
            raise ValueError("components must share dimension")
        if not self.genealogy:
            self.genealogy = [[] for _ in self.components]
        if len(self.genealogy) != len(self.components):
            raise ValueError("one genealogy entry per component required")

    def __len__(self) -> int:
        return len(self.components)

    @property
    def dim(self) -> int:
        return self.components[0].dim

    def mean(self) -> np.ndarray:
        return sum(w * c.mean for w, c in zip(self.weights, self.components))

    def covariance(self) -> np.ndarray:
        mu = self.mean()
        out = np.zeros((self.dim, self.dim))
        for w, c in zip(self.weights, self.components):
            d = c.mean - mu
            out += w * (c.cov + np.outer(d, d))
        return out

    def pdf(self, x: np.ndarray) -> np.ndarray:
        from scipy import stats

        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.zeros(x.shape[0])
        for w, c in zip(self.weights, self.components):
            out += w * stats.multivariate_normal.pdf(
                x, mean=c.mean, cov=c.cov, allow_singular=True
            )
        return out

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        counts = rng.multinomial(n, self.weights)
        parts = [c.sample(rng, k) for c, k in zip(self.components, counts) if k > 0]
        x = np.concatenate(parts, axis=0)
        return x[rng.permutation(n)]


def split(belief: GaussianBelief, j: int, library: SplitLibrary | None = None) -> GaussianMixture:
    """Split a Gaussian along its j-th principal axis into three components.

    The covariance is diagonalized, the univariate split constants are
    applied along eigenvector j, and all components share one contracted
    covariance.  The mixture mean equals the original mean exactly.
    """
    lib = library or SplitLibrary()
    cov = belief.cov
    d = belief.dim
    if not 0 <= j < d:
        raise ValueError(f"split direction {j} outside [0, {d})")
    lam, vecs = np.linalg.eigh(cov)
    if lam[0] <= 0.0:
        raise ValueError("split requires a positive-definite covariance")
    # eigh returns ascending eigenvalues; callers index directions by
    # descending variance so that j=0 is the dominant axis.
    order = np.argsort(lam)[::-1]
    lam, vecs = lam[order], vecs[:, order]
    offset = lib.mu_bar * np.sqrt(lam[j]) * vecs[:, j]
    lam_new = lam.copy()
    lam_new[j] *= lib.sigma**2
    shared_cov = (vecs * lam_new) @ vecs.T
    shared_cov = 0.5 * (shared_cov + shared_cov.T)
    comps = [
        GaussianBelief(belief.mean, shared_cov),
        GaussianBelief(belief.mean - offset, shared_cov),
        GaussianBelief(belief.mean + offset, shared_cov),
    ]
    return GaussianMixture(
        np.array(lib.weights),
        comps,
        [[(j, 0)], [(j, -1)], [(j, +1)]],
    )


def nli_from_coefficients(jac: np.ndarray, hessians: np.ndarray) -> tuple[float, np.ndarray]:
    """Nonlinearity index from first/second-order coefficients.

    ``jac`` is the Jacobian and ``hessians[m]`` the Hessian of output m, both
    already expressed in whitened input coordinates.  Direction j's index is
    the Frobenius norm of the Jacobian's rate of change along j relative to
    the Jacobian itself.
    """
    jac = np.asarray(jac, dtype=float)
    hessians = np.asarray(hessians, dtype=float)
    a_norm = float(np.linalg.norm(jac))
    if a_norm == 0.0:
        raise ValueError("degenerate map: zero Jacobian")
    # B_j[m, l] = d(jac[m, l]) / d(delta_j) = hessians[m, l, j]
    directional = np.sqrt(np.sum(hessians**2, axis=(0, 1))) / a_norm
    return float(directional.max()), directional


def nli(map_pv: PolyVector, scale: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Nonlinearity index of a polynomial map.

    If ``scale`` (typically the Cholesky factor of the input covariance) is
    given, the map's coefficients are rescaled to whitened coordinates first;
    otherwise the map must already be expressed in them.
    """
    jac = map_pv.jacobian_at_zero()
    hes = map_pv.hessians_at_zero()
    if scale is not None:
        scale = np.asarray(scale, dtype=float)
        jac = jac @ scale
        hes = np.einsum("ki,mkl,lj->mij", scale, hes, scale)
    return nli_from_coefficients(jac, hes)


def adaptive_decompose(
    belief: GaussianBelief,
    map_builder,
    eps_nli: float = 5e-4,
    alpha_min: float = 0.5,
    library: SplitLibrary | None = None,
) -> GaussianMixture:
    """Decompose a belief until the map is nearly linear on every component.

    ``map_builder(mean)`` must return the map's Taylor expansion (a
    PolyVector in raw input deviations) about that center.  Components whose
    whitened nonlinearity index exceeds ``eps_nli`` are split along the most
    nonlinear principal direction, breadth first, unless the resulting side
    weights would fall to ``alpha_min`` or below.  Each accepted component is
    then propagated linearly through its local expansion.

    With ``alpha_min`` = 0.5 the side weight (1-alpha)/2 of even the first
    split is below the floor, so splitting is disabled and the output is the
    single linearly propagated component.
    """
    if eps_nli <= 0.0:
        raise ValueError("eps_nli must be positive")
    if not 0.0 < alpha_min <= 0.5:
        raise ValueError("alpha_min must lie in (0, 0.5]")
    lib = library or SplitLibrary()

    queue: deque[tuple[float, GaussianBelief, list]] = deque([(1.0, belief, [])])
    out_w, out_c, out_g, out_in = [], [], [], []
    while queue:
        w, comp, hist = queue.popleft()
        pv = map_builder(comp.mean)
        scale = cholesky_lower(comp.cov)
        eta, directional = nli(pv, scale)
        child_w = w * (1.0 - lib.alpha) / 2.0
        if eta > eps_nli and child_w > alpha_min:
            j = int(np.argmax(directional > directional.max() - 1e-12))
            pieces = split(comp, j, lib)
            for pw, pc, pg in zip(pieces.weights, pieces.components, pieces.genealogy):
                queue.append((w * pw, pc, hist + pg))
        else:
            # The expansion is in deviations about comp.mean: its constant
            # part is the mapped mean and the Jacobian sandwich gives the
            # linearized output covariance.
            jac = pv.jacobian_at_zero()
            cov = jac @ comp.cov @ jac.T
            out_w.append(w)
            out_c.append(GaussianBelief(pv.const(), 0.5 * (cov + cov.T)))
            out_g.append(hist)
            out_in.append(comp)
    return GaussianMixture(np.array(out_w), out_c, out_g, inputs=out_in)
