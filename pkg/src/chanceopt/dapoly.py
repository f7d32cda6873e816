"""Truncated multivariate Taylor-polynomial arithmetic.

This is the differential-algebra (DA) number type used everywhere else:
dynamics expansion, automatic differentiation, and transcription of
stochastic quantities all operate on :class:`TruncatedPolynomial` values.

Storage is dense, keyed by graded-lexicographic monomial rank.  For the
dimensions this solver needs (up to ~10 variables, order 3) the full
coefficient vector is short (a few hundred entries) and all operations
reduce to precomputed index gathers plus ``np.bincount`` reductions, which
is far faster in NumPy than sparse dict manipulation.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np


class DaError(ValueError):
    """Structural error: mismatched variable count / order, bad arity."""


class DaDomainError(ArithmeticError):
    """Intrinsic applied outside its domain (e.g. sqrt of <= 0 constant)."""


def _binom(n: int, k: int) -> int:
    return math.comb(n, k)


class DaTable:
    """Precomputed index tables for a fixed (n_vars, order) algebra."""

    _cache: dict[tuple[int, int], "DaTable"] = {}

    def __init__(self, n_vars: int, order: int):
        if n_vars < 1 or order < 1:
            raise DaError(f"need n_vars >= 1 and order >= 1, got ({n_vars}, {order})")
        self.n_vars = n_vars
        self.order = order

        exps = sorted(
            (e for e in itertools.product(range(order + 1), repeat=n_vars) if sum(e) <= order),
            key=lambda e: (sum(e), e),
        )
        self.exps = np.array(exps, dtype=np.int64)
        self.n_terms = len(exps)
        self.degree = self.exps.sum(axis=1)
        self.index = {tuple(e): i for i, e in enumerate(exps)}

        # Multiplication table: all monomial pairs whose product survives truncation.
        ii, jj, kk = [], [], []
        for i, ei in enumerate(exps):
            di = sum(ei)
            for j, ej in enumerate(exps):
                if di + sum(ej) <= order:
                    ii.append(i)
                    jj.append(j)
                    kk.append(self.index[tuple(a + b for a, b in zip(ei, ej))])
        self.mul_ii = np.array(ii, dtype=np.int64)
        self.mul_jj = np.array(jj, dtype=np.int64)
        self.mul_kk = np.array(kk, dtype=np.int64)

        # Taylor-shift table: recentring p(a + delta) is the linear map
        # c'[gamma] = sum_{beta >= gamma} c[beta] * prod(binom(beta, gamma)) * a^(beta-gamma).
        src, dst, diff, coef = [], [], [], []
        for b, eb in enumerate(exps):
            for g, eg in enumerate(exps):
                if all(x >= y for x, y in zip(eb, eg)):
                    src.append(b)
                    dst.append(g)
                    diff.append(self.index[tuple(x - y for x, y in zip(eb, eg))])
                    coef.append(math.prod(_binom(x, y) for x, y in zip(eb, eg)))
        self.shift_src = np.array(src, dtype=np.int64)
        self.shift_dst = np.array(dst, dtype=np.int64)
        self.shift_diff = np.array(diff, dtype=np.int64)
        self.shift_coef = np.array(coef, dtype=np.float64)

        # Per-variable derivative maps.
        self.diff_src, self.diff_dst, self.diff_coef = [], [], []
        for v in range(n_vars):
            mask = self.exps[:, v] > 0
            s = np.nonzero(mask)[0]
            d = np.array(
                [self.index[tuple(e - (np.arange(n_vars) == v))] for e in self.exps[s]],
                dtype=np.int64,
            )
            self.diff_src.append(s)
            self.diff_dst.append(d)
            self.diff_coef.append(self.exps[s, v].astype(np.float64))

        # Monomial factorization (for generic composition): every monomial of
        # degree >= 1 is var[i] times the monomial parent[i].
        self.parent = np.zeros(self.n_terms, dtype=np.int64)
        self.var = np.zeros(self.n_terms, dtype=np.int64)
        for i, e in enumerate(exps):
            if sum(e) == 0:
                continue
            v = next(v for v in range(n_vars) if e[v] > 0)
            self.var[i] = v
            self.parent[i] = self.index[tuple(x - (w == v) for w, x in zip(range(n_vars), e))]

        # First/second-order coefficient slots.
        self.lin_idx = np.array(
            [self.index[tuple((np.arange(n_vars) == v).astype(int))] for v in range(n_vars)],
            dtype=np.int64,
        )
        self.quad_idx = np.zeros((n_vars, n_vars), dtype=np.int64)
        if order >= 2:
            for a in range(n_vars):
                for b in range(n_vars):
                    e = np.zeros(n_vars, dtype=int)
                    e[a] += 1
                    e[b] += 1
                    self.quad_idx[a, b] = self.index[tuple(e)]

    @classmethod
    def get(cls, n_vars: int, order: int) -> "DaTable":
        key = (n_vars, order)
        if key not in cls._cache:
            cls._cache[key] = cls(n_vars, order)
        return cls._cache[key]


class TruncatedPolynomial:
    """A multivariate Taylor expansion truncated at a fixed total order.

    Immutable by convention: no public method mutates ``coeffs`` in place,
    so values can be shared freely across threads.
    """

    __slots__ = ("table", "coeffs")
    __array_priority__ = 100  # make ndarray * poly defer to our __rmul__

    def __init__(self, table: DaTable, coeffs: np.ndarray):
        self.table = table
        self.coeffs = coeffs

    # -- constructors -------------------------------------------------------

    @classmethod
    def constant(cls, value: float, n_vars: int, order: int) -> "TruncatedPolynomial":
        t = DaTable.get(n_vars, order)
        c = np.zeros(t.n_terms)
        c[0] = value
        return cls(t, c)

    @classmethod
    def variable(cls, v: int, n_vars: int, order: int, center: float = 0.0) -> "TruncatedPolynomial":
        """The expansion ``center + delta_v``."""
        t = DaTable.get(n_vars, order)
        c = np.zeros(t.n_terms)
        c[0] = center
        c[t.lin_idx[v]] = 1.0
        return cls(t, c)

    @classmethod
    def from_dict(cls, d: dict[tuple[int, ...], float], n_vars: int, order: int) -> "TruncatedPolynomial":
        t = DaTable.get(n_vars, order)
        c = np.zeros(t.n_terms)
        for e, val in d.items():
            if sum(e) > order:
                raise DaError(f"multi-index {e} exceeds order {order}")
            c[t.index[tuple(e)]] = val
        return cls(t, c)

    # -- basic queries -------------------------------------------------------

    @property
    def n_vars(self) -> int:
        return self.table.n_vars

    @property
    def order(self) -> int:
        return self.table.order

    @property
    def const(self) -> float:
        return float(self.coeffs[0])

    def coefficient(self, exponents: tuple[int, ...]) -> float:
        return float(self.coeffs[self.table.index[tuple(exponents)]])

    def __repr__(self) -> str:
        nz = int(np.count_nonzero(self.coeffs))
        return f"TruncatedPolynomial(n_vars={self.n_vars}, order={self.order}, nnz={nz}, const={self.const:g})"

    def _check(self, other: "TruncatedPolynomial") -> None:
        if self.table is not other.table:
            raise DaError(
                f"algebra mismatch: ({self.n_vars},{self.order}) vs ({other.n_vars},{other.order})"
            )

    # -- ring operations -----------------------------------------------------

    def __add__(self, other):
        if isinstance(other, TruncatedPolynomial):
            self._check(other)
            return TruncatedPolynomial(self.table, self.coeffs + other.coeffs)
        c = self.coeffs.copy()
        c[0] += float(other)
        return TruncatedPolynomial(self.table, c)

    __radd__ = __add__

    def __neg__(self):
        return TruncatedPolynomial(self.table, -self.coeffs)

    def __sub__(self, other):
        return self + (-other if isinstance(other, TruncatedPolynomial) else -float(other))

    def __rsub__(self, other):
        return (-self) + float(other)

    def __mul__(self, other):
        if isinstance(other, TruncatedPolynomial):
            self._check(other)
            t = self.table
            prod = np.bincount(
                t.mul_kk,
                weights=self.coeffs[t.mul_ii] * other.coeffs[t.mul_jj],
                minlength=t.n_terms,
            )
            return TruncatedPolynomial(t, prod)
        return TruncatedPolynomial(self.table, self.coeffs * float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, TruncatedPolynomial):
            return self * recip(other)
        return TruncatedPolynomial(self.table, self.coeffs / float(other))

    def __rtruediv__(self, other):
        return float(other) * recip(self)

    def __pow__(self, k: int):
        if not isinstance(k, int) or k < 0:
            raise DaError("integer powers only; use power() for real exponents")
        out = TruncatedPolynomial.constant(1.0, self.n_vars, self.order)
        for _ in range(k):
            out = out * self
        return out

    # -- evaluation / differentiation ----------------------------------------

    def eval(self, point) -> float:
        """Exact evaluation of the polynomial at a deviation vector."""
        point = np.asarray(point, dtype=float)
        if point.shape != (self.n_vars,):
            raise DaError(f"point has shape {point.shape}, expected ({self.n_vars},)")
        mon = np.prod(point ** self.table.exps, axis=1)
        return float(self.coeffs @ mon)

    def eval_many(self, points: np.ndarray) -> np.ndarray:
        """Vectorized :meth:`eval` over rows of ``points`` (shape (m, n_vars))."""
        points = np.asarray(points, dtype=float)
        mon = np.prod(points[:, None, :] ** self.table.exps[None, :, :], axis=2)
        return mon @ self.coeffs

    def deriv(self, v: int) -> "TruncatedPolynomial":
        """Partial derivative with respect to variable ``v`` (same storage order)."""
        t = self.table
        c = np.zeros(t.n_terms)
        np.add.at(c, t.diff_dst[v], t.diff_coef[v] * self.coeffs[t.diff_src[v]])
        return TruncatedPolynomial(t, c)

    def grad(self) -> "PolyVector":
        return PolyVector([self.deriv(v) for v in range(self.n_vars)])

    def gradient_at_zero(self) -> np.ndarray:
        return self.coeffs[self.table.lin_idx].copy()

    def hessian_at_zero(self) -> np.ndarray:
        if self.order < 2:
            return np.zeros((self.n_vars, self.n_vars))
        h = self.coeffs[self.table.quad_idx].copy()
        h[np.diag_indices(self.n_vars)] *= 2.0
        return h

    def extract(self):
        """(value, gradient, Hessian) at the expansion point."""
        return self.const, self.gradient_at_zero(), self.hessian_at_zero()

    # -- recentring / composition --------------------------------------------

    def shift(self, a) -> "TruncatedPolynomial":
        """Recentre: the expansion of the same function at point + a.

        Computes p(a + delta) exactly (a polynomial identity, no truncation
        loss).  This is the fast path used by the forward pass and the
        mixture-splitting machinery.
        """
        a = np.asarray(a, dtype=float)
        t = self.table
        amon = np.prod(a ** t.exps, axis=1)
        c = np.bincount(
            t.shift_dst,
            weights=self.coeffs[t.shift_src] * t.shift_coef * amon[t.shift_diff],
            minlength=t.n_terms,
        )
        return TruncatedPolynomial(t, c)

    def compose(self, args: "PolyVector") -> "TruncatedPolynomial":
        """General composition p(args), truncated at the arguments' order."""
        if len(args) != self.n_vars:
            raise DaError(f"composition needs {self.n_vars} arguments, got {len(args)}")
        t_out = args[0].table
        one = TruncatedPolynomial.constant(1.0, t_out.n_vars, t_out.order)
        monvals: list[TruncatedPolynomial] = [one]
        t = self.table
        for i in range(1, t.n_terms):
            monvals.append(monvals[t.parent[i]] * args[t.var[i]])
        out = TruncatedPolynomial.constant(0.0, t_out.n_vars, t_out.order)
        for i in np.nonzero(self.coeffs)[0]:
            out = out + float(self.coeffs[i]) * monvals[i]
        return out


# -- intrinsics ---------------------------------------------------------------


def _apply_series(p: TruncatedPolynomial, series: np.ndarray) -> TruncatedPolynomial:
    """sum_k series[k] * (p - const(p))^k via Horner."""
    w = p - p.const
    out = TruncatedPolynomial.constant(float(series[-1]), p.n_vars, p.order)
    for a in series[-2::-1]:
        out = out * w + float(a)
    return out


def recip(p: TruncatedPolynomial) -> TruncatedPolynomial:
    c = p.const
    if c == 0.0:
        raise DaDomainError("recip of polynomial with zero constant part")
    k = np.arange(p.order + 1)
    return _apply_series(p, (-1.0) ** k / c ** (k + 1))


def power(p: TruncatedPolynomial, alpha: float) -> TruncatedPolynomial:
    """p**alpha for a real exponent (constant part must be positive)."""
    c = p.const
    if c <= 0.0:
        raise DaDomainError(f"power({alpha}) needs positive constant part, got {c}")
    series = np.empty(p.order + 1)
    term = c**alpha
    for k in range(p.order + 1):
        series[k] = term
        term *= (alpha - k) / (k + 1) / c
    return _apply_series(p, series)


def sqrt(p: TruncatedPolynomial) -> TruncatedPolynomial:
    if p.const <= 0.0:
        raise DaDomainError(f"sqrt needs positive constant part, got {p.const}")
    return power(p, 0.5)


def exp(p: TruncatedPolynomial) -> TruncatedPolynomial:
    k = np.arange(p.order + 1)
    return _apply_series(p, math.e ** p.const / np.array([math.factorial(int(i)) for i in k]))


def log(p: TruncatedPolynomial) -> TruncatedPolynomial:
    c = p.const
    if c <= 0.0:
        raise DaDomainError(f"log needs positive constant part, got {c}")
    series = np.empty(p.order + 1)
    series[0] = math.log(c)
    for k in range(1, p.order + 1):
        series[k] = (-1.0) ** (k + 1) / (k * c**k)
    return _apply_series(p, series)


def sin(p: TruncatedPolynomial) -> TruncatedPolynomial:
    c = p.const
    table = [math.sin(c), math.cos(c), -math.sin(c), -math.cos(c)]
    series = np.array([table[k % 4] / math.factorial(k) for k in range(p.order + 1)])
    return _apply_series(p, series)


def cos(p: TruncatedPolynomial) -> TruncatedPolynomial:
    c = p.const
    table = [math.cos(c), -math.sin(c), -math.cos(c), math.sin(c)]
    series = np.array([table[k % 4] / math.factorial(k) for k in range(p.order + 1)])
    return _apply_series(p, series)


INTRINSICS = {"recip": recip, "sqrt": sqrt, "exp": exp, "log": log, "sin": sin, "cos": cos}


def intrinsic(name: str, p: TruncatedPolynomial) -> TruncatedPolynomial:
    try:
        fn = INTRINSICS[name]
    except KeyError:
        raise DaError(f"unknown intrinsic {name!r}; choose from {sorted(INTRINSICS)}") from None
    return fn(p)


# -- vectors of polynomials ----------------------------------------------------


@dataclass(frozen=True)
class PolyVector:
    """A list of polynomials sharing one (n_vars, order) algebra."""

    components: list

    def __post_init__(self):
        if not self.components:
            raise DaError("PolyVector needs at least one component")
        t = self.components[0].table
        for p in self.components:
            if p.table is not t:
                raise DaError("PolyVector components must share n_vars and order")

    def __len__(self) -> int:
        return len(self.components)

    def __getitem__(self, i):
        return self.components[i]

    def __iter__(self):
        return iter(self.components)

    @property
    def table(self) -> DaTable:
        return self.components[0].table

    @property
    def n_vars(self) -> int:
        return self.table.n_vars

    @property
    def order(self) -> int:
        return self.table.order

    @classmethod
    def identity(cls, n_vars: int, order: int) -> "PolyVector":
        return cls([TruncatedPolynomial.variable(v, n_vars, order) for v in range(n_vars)])

    def const(self) -> np.ndarray:
        return np.array([p.const for p in self.components])

    def eval(self, point) -> np.ndarray:
        return np.array([p.eval(point) for p in self.components])

    def jacobian_at_zero(self) -> np.ndarray:
        return np.stack([p.gradient_at_zero() for p in self.components])

    def hessians_at_zero(self) -> np.ndarray:
        """Shape (len, n_vars, n_vars)."""
        return np.stack([p.hessian_at_zero() for p in self.components])

    def shift(self, a) -> "PolyVector":
        return PolyVector([p.shift(a) for p in self.components])

    def compose(self, args: "PolyVector") -> "PolyVector":
        return PolyVector([p.compose(args) for p in self.components])


def convergence_radius(pv: PolyVector, epsilon: float) -> float:
    """Estimated radius within which truncation error stays below epsilon.

    Uses the decay of per-degree coefficient mass: S_i is the summed magnitude
    of all degree-i coefficients over all components; log S_i is fitted
    linearly in i and extrapolated one degree past the truncation order.
    Exact polynomial maps (no decay information, all S_i zero for i >= 1)
    report an infinite radius.
    """
    if epsilon <= 0.0:
        raise DaError("epsilon must be positive")
    t = pv.table
    if t.order < 2:
        raise DaError("convergence radius needs order >= 2")
    mags = np.zeros(t.order + 1)
    for p in pv.components:
        np.add.at(mags, t.degree, np.abs(p.coeffs))
    if mags[t.order] == 0.0:
        # No coefficient mass at the truncation order: the map is an exact
        # polynomial under this truncation, so there is no decay to
        # extrapolate and the expansion is globally valid.
        return math.inf
    levels = np.arange(1, t.order + 1)
    s = mags[1:]
    nz = s > 0.0
    if nz.sum() == 1:
        log_next = math.log(s[nz][0])
    else:
        slope, intercept = np.polyfit(levels[nz], np.log(s[nz]), 1)
        log_next = intercept + slope * (t.order + 1)
    s_next = math.exp(log_next)
    return (epsilon / s_next) ** (1.0 / (t.order + 1))
