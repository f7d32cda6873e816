"""Constrained differential dynamic programming with an augmented-Lagrangian
outer loop over truncated-Taylor stage expansions.

The solver optimizes a nominal trajectory together with linear feedback gains
while propagating Gaussian state uncertainty through the (recentered) stage
expansions.  Inequality path constraints and the terminal confidence-region
constraint are tightened by deterministic margins so that the converged
nominal trajectory satisfies the underlying probabilistic requirements, and
the whole stack is driven to feasibility by a standard augmented Lagrangian.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dapoly import PolyVector, TruncatedPolynomial, convergence_radius
from .dapoly import sqrt as poly_sqrt
from .dynamics import StageModel, expand_map, expand_scalar, smooth_sqrt
from .gauss import GaussianBelief, tail_radius
from .transcribe import TranscriptionKind


class SolverError(RuntimeError):
    """Raised when the optimizer cannot make progress."""


@dataclass
class SolverOptions:
    """Tolerances and switches for the trajectory optimizer."""

    beta: float = 0.05
    kind: TranscriptionKind = TranscriptionKind.FIRST_ORDER
    stochastic: bool = True          # False -> plain deterministic solve
    beta_terminal: float | None = None   # defaults to beta
    order: int = 3
    eps_aul: float = 1e-6
    eps_ddp: float = 1e-4
    eps_da: float = 1e-6
    max_outer: int = 30
    max_inner: int = 1000
    max_line_search: int = 16
    zeta: float = 0.5                # line-search backtracking factor
    reg_init: float = 0.0
    reg_floor: float = 1e-12
    mu_init: float = 1.0
    mu_scale: float = 10.0
    mu_max: float = 1e12
    # When True the first-order cost margins are differentiated and fed to the
    # backward sweep; when False (default) they are re-evaluated every
    # iteration but treated as constants, so the descent direction matches the
    # deterministic solver whenever no constraint is active.
    cost_margin_derivatives: bool = False

    @property
    def beta_t(self) -> float:
        return self.beta if self.beta_terminal is None else self.beta_terminal


@dataclass
class StageRecord:
    """Per-stage iterate: belief, nominal control, gain, and stage expansion."""

    belief: GaussianBelief
    u: np.ndarray
    K: np.ndarray
    f_poly: PolyVector
    radius: float


@dataclass
class AulState:
    """Multipliers and penalty weight of the augmented Lagrangian."""

    lam: np.ndarray            # (n_stages, n_constraints), >= 0
    lam_terminal: float
    mu: float

    def __post_init__(self):
        if np.any(self.lam < 0.0) or self.lam_terminal < 0.0:
            raise ValueError("multipliers must be nonnegative")
        if self.mu <= 0.0:
            raise ValueError("penalty weight must be positive")


@dataclass
class TrajectoryIterate:
    """A full trajectory iterate: stage records plus the terminal belief."""

    model: StageModel
    records: list
    terminal: GaussianBelief

    @property
    def states(self) -> np.ndarray:
        xs = [r.belief.mean for r in self.records]
        xs.append(self.terminal.mean)
        return np.stack(xs)

    @property
    def controls(self) -> np.ndarray:
        return np.stack([r.u for r in self.records])

    @property
    def gains(self) -> np.ndarray:
        return np.stack([r.K for r in self.records])

    @property
    def beliefs(self) -> list:
        return [r.belief for r in self.records] + [self.terminal]


@dataclass
class AulResult:
    """Output of :func:`aul_solve`."""

    trajectory: TrajectoryIterate
    quantile_cost: float
    nominal_cost: float
    g_max: float
    n_outer: int
    n_inner: int
    converged: bool
    aul: AulState
    log: list = field(default_factory=list)
    residuals: np.ndarray | None = None


# -- expansions -------------------------------------------------------------------


def expand_stage(model: StageModel, x: np.ndarray, u: np.ndarray,
                 eps_da: float, order: int = 3) -> tuple[PolyVector, float]:
    """Taylor-expand one stage map and estimate its validity radius."""
    pv = expand_map(model.step, x, u, order=order)
    return pv, convergence_radius(pv, eps_da)


def propagate_belief(record: StageRecord, noise: np.ndarray) -> GaussianBelief:
    """Closed-loop linear covariance propagation through one stage."""
    n_x = record.belief.dim
    jac = record.f_poly.jacobian_at_zero()
    f_x, f_u = jac[:, :n_x], jac[:, n_x:]
    a_cl = f_x + f_u @ record.K
    cov = a_cl @ record.belief.cov @ a_cl.T + noise
    return GaussianBelief(record.f_poly.const(), 0.5 * (cov + cov.T))


# -- transcription ----------------------------------------------------------------


_SIGMA_SQ_FLOOR = 1e-300


def _closed_loop_gradient_polys(h: TruncatedPolynomial, K: np.ndarray) -> list:
    """Polynomials of d(h)/d(x_i) after substituting du = K dx."""
    n_u, n_x = K.shape
    out = []
    for i in range(n_x):
        a_i = h.deriv(i)
        for j in range(n_u):
            if K[j, i] != 0.0:
                a_i = a_i + K[j, i] * h.deriv(n_x + j)
        out.append(a_i)
    return out


def sigma_sq_poly(h: TruncatedPolynomial, K: np.ndarray,
                  cov: np.ndarray) -> TruncatedPolynomial:
    """First-order variance of h(x, u) under x ~ (0, cov), u = K x, as a polynomial
    of the expansion point."""
    grads = _closed_loop_gradient_polys(h, K)
    n_x = cov.shape[0]
    total = None
    for i in range(n_x):
        c_i = None
        for j in range(n_x):
            w = cov[i, j]
            if w == 0.0:
                continue
            c_i = w * grads[j] if c_i is None else c_i + w * grads[j]
        if c_i is None:
            continue
        term = grads[i] * c_i
        total = term if total is None else total + term
    if total is None:
        total = TruncatedPolynomial.constant(0.0, h.n_vars, h.order)
    return total


def _margin_poly(h: TruncatedPolynomial, K: np.ndarray, cov: np.ndarray,
                 multiplier: float, with_derivatives: bool) -> TruncatedPolynomial:
    """First-order margin multiplier * sigma_h as a polynomial (or constant)."""
    s2 = sigma_sq_poly(h, K, cov)
    s2_0 = s2.const
    if s2_0 <= _SIGMA_SQ_FLOOR:
        value = multiplier * math.sqrt(max(s2_0, 0.0))
        return TruncatedPolynomial.constant(value, h.n_vars, h.order)
    if not with_derivatives:
        return TruncatedPolynomial.constant(
            multiplier * math.sqrt(s2_0), h.n_vars, h.order)
    # Convex upper model of the deviation: sqrt(s) <= (s + s0) / (2 sqrt(s0)),
    # tight in value and gradient at the expansion point.  The exact truncated
    # sqrt series is useless here: its convergence radius collapses as the
    # deviation shrinks and the runaway coefficients wreck the local
    # quadratic model.
    sigma_0 = math.sqrt(s2_0)
    return (multiplier / (2.0 * sigma_0)) * (s2 + s2_0)


def transcribe_polys(polys: list, K: np.ndarray, cov: np.ndarray, beta: float,
                     kind: TranscriptionKind,
                     margin_derivatives: bool = True) -> list:
    """Tighten a vector of expanded functions by their distributional margins.

    The joint dimension of the confidence bound is the vector length.  Returns
    polynomials whose constant parts are the tightened values and whose
    derivatives (when ``margin_derivatives``) include the margin sensitivity.
    """
    if not polys:
        return []
    d = len(polys)
    multiplier = tail_radius(d, beta)
    if kind is TranscriptionKind.SPECTRAL_RADIUS:
        grad = np.stack([
            np.array([g.const for g in _closed_loop_gradient_polys(h, K)])
            for h in polys
        ])
        cov_y = grad @ cov @ grad.T
        margin = multiplier * math.sqrt(max(np.linalg.eigvalsh(cov_y)[-1], 0.0))
        return [h + margin for h in polys]
    return [
        h + _margin_poly(h, K, cov, multiplier, margin_derivatives)
        for h in polys
    ]


def terminal_constraint_poly(model: StageModel, x_n: np.ndarray,
                             xt: GaussianBelief, beta_t: float,
                             order: int = 3) -> TruncatedPolynomial | None:
    """Expand the terminal confidence-region constraint about the final state.

    The constraint bounds the squared Mahalanobis distance of the final state
    to the target mean (in the target metric, over ``model.terminal_dims``) by
    the chi-square quantile at confidence 1 - beta_t.  Returns None when the
    problem has no terminal constraint.
    """
    dims = model.terminal_dims
    if dims is None or len(dims) == 0:
        return None
    dims = np.asarray(dims, dtype=int)
    metric = np.linalg.inv(xt.cov[np.ix_(dims, dims)])
    radius = tail_radius(len(dims), beta_t)
    target = xt.mean[dims]

    # Distance form: ||x - target||_metric - radius.  The same feasible region
    # as the squared form, but the constraint grows linearly (not
    # quadratically) with the miss, which keeps the penalty curvature tame
    # when the iterate is still far from the target.
    def g_terminal(xs, us):
        err = [xs[i] - target[pos] for pos, i in enumerate(dims)]
        total = None
        for p in range(len(dims)):
            row = None
            for q in range(len(dims)):
                w = metric[p, q]
                if w == 0.0:
                    continue
                row = w * err[q] if row is None else row + w * err[q]
            if row is None:
                continue
            term = err[p] * row
            total = term if total is None else total + term
        return smooth_sqrt(total) - radius

    return expand_scalar(g_terminal, x_n, np.zeros(model.n_u), order=order)


# -- augmented-Lagrangian cost assembly ---------------------------------------------


def _phr_penalty(g: TruncatedPolynomial, lam: float, mu: float) -> TruncatedPolynomial:
    """Smooth augmented-Lagrangian term for one inequality g <= 0."""
    if lam + mu * g.const > 0.0:
        return lam * g + 0.5 * mu * (g * g)
    return TruncatedPolynomial.constant(-lam * lam / (2.0 * mu), g.n_vars, g.order)


@dataclass
class _StageEval:
    """Transcribed quantities at one stage of the current iterate."""

    l_poly: TruncatedPolynomial              # tightened stage cost
    g_polys: list                            # tightened path constraints
    aug_poly: TruncatedPolynomial            # cost + multiplier/penalty terms


@dataclass
class _Evaluation:
    """Everything the sweep and the outer loop need at one iterate."""

    stages: list                             # list[_StageEval]
    phi_poly: TruncatedPolynomial            # tightened terminal cost
    g_terminal: TruncatedPolynomial | None   # tightened terminal constraint
    aug_terminal: TruncatedPolynomial        # phi + terminal penalty terms
    quantile_cost: float
    nominal_cost: float
    merit: float
    g_max: float
    residuals: np.ndarray                    # transcribed constraint values


def _evaluate(model: StageModel, records: list, terminal: GaussianBelief,
              xt: GaussianBelief, aul: AulState, opts: SolverOptions) -> _Evaluation:
    """Transcribe costs/constraints at the current iterate and assemble the
    augmented per-stage cost polynomials."""
    beta = opts.beta
    stochastic = opts.stochastic
    stages = []
    quantile = 0.0
    nominal = 0.0
    merit = 0.0
    g_max = -np.inf
    residuals = []
    zero_k = np.zeros((model.n_u, model.n_x))

    for k, rec in enumerate(records):
        x, u = rec.belief.mean, rec.u
        gain_k = rec.K
        l_poly = expand_scalar(model.stage_cost, x, u, order=opts.order)
        g_raw = model.path_constraints(list(x), list(u))
        g_polys = [expand_scalar(lambda xs, us, i=i: model.path_constraints(xs, us)[i],
                                 x, u, order=opts.order)
                   for i in range(len(g_raw))]
        if stochastic:
            l_poly = transcribe_polys(
                [l_poly], gain_k, rec.belief.cov, beta, opts.kind,
                margin_derivatives=opts.cost_margin_derivatives)[0]
            g_polys = transcribe_polys(
                g_polys, gain_k, rec.belief.cov, beta, opts.kind,
                margin_derivatives=True)
        aug = l_poly
        for i, g in enumerate(g_polys):
            aug = aug + _phr_penalty(g, aul.lam[k, i], aul.mu)
            g_max = max(g_max, g.const)
            residuals.append(g.const)
        stages.append(_StageEval(l_poly, g_polys, aug))
        quantile += l_poly.const
        nominal += model.stage_cost(list(x), list(u))
        merit += aug.const

    x_n = terminal.mean
    phi_poly = expand_scalar(lambda xs, us: model.terminal_cost(xs, xt.mean),
                             x_n, np.zeros(model.n_u), order=opts.order)
    g_term = terminal_constraint_poly(model, x_n, xt, opts.beta_t, order=opts.order)
    if stochastic:
        phi_poly = transcribe_polys(
            [phi_poly], zero_k, terminal.cov, beta, opts.kind,
            margin_derivatives=opts.cost_margin_derivatives)[0]
        if g_term is not None:
            g_term = transcribe_polys(
                [g_term], zero_k, terminal.cov, opts.beta_t, opts.kind,
                margin_derivatives=True)[0]
    aug_term = phi_poly
    if g_term is not None:
        aug_term = aug_term + _phr_penalty(g_term, aul.lam_terminal, aul.mu)
        g_max = max(g_max, g_term.const)
        residuals.append(g_term.const)
    quantile += phi_poly.const
    nominal += model.terminal_cost(list(x_n), xt.mean)
    merit += aug_term.const
    if not residuals:
        g_max = 0.0

    return _Evaluation(stages, phi_poly, g_term, aug_term,
                       quantile, nominal, merit, g_max, np.asarray(residuals))


# -- backward sweep ---------------------------------------------------------------


def _scalar_blocks(poly: TruncatedPolynomial, n_x: int):
    g = poly.gradient_at_zero()
    h = poly.hessian_at_zero()
    return g[:n_x], g[n_x:], h[:n_x, :n_x], h[n_x:, n_x:], h[n_x:, :n_x]


def _try_cholesky(q_uu: np.ndarray, shift0: float, shift_cap: float):
    """Shifted Cholesky attempt; returns (factor, shift) or (None, shift0)."""
    shift = shift0
    while shift <= shift_cap:
        try:
            return np.linalg.cholesky(q_uu + shift * np.eye(q_uu.shape[0])), shift
        except np.linalg.LinAlgError:
            shift = max(2.0 * shift, 1e-8)
    return None, shift0


def _psd_projection(mat: np.ndarray) -> np.ndarray:
    """Nearest (Frobenius) positive-semidefinite matrix to a symmetric one."""
    eigvals, eigvecs = np.linalg.eigh(mat)
    if eigvals[0] >= 0.0:
        return mat
    clipped = (eigvecs * np.maximum(eigvals, 0.0)) @ eigvecs.T
    return 0.5 * (clipped + clipped.T)


def _stage_solution(q_x, q_u, q_xx, q_uu, q_ux, chol, shift):
    """Gains from the regularized control block, plus the value update.

    The regularized q_uu is used consistently in the value recursion (Schur
    form), and the propagated value Hessian is projected onto the
    positive-semidefinite cone: a single slightly indefinite stage would
    otherwise poison every upstream control block.
    """
    rhs = np.column_stack([q_u, q_ux])
    sol = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
    a_k, k_k = -sol[:, 0], -sol[:, 1:]
    q_uu_reg = q_uu + shift * np.eye(q_uu.shape[0])
    v_x = q_x + k_k.T @ q_uu_reg @ a_k + k_k.T @ q_u + q_ux.T @ a_k
    v_xx = q_xx + k_k.T @ q_uu_reg @ k_k + k_k.T @ q_ux + q_ux.T @ k_k
    return a_k, k_k, v_x, _psd_projection(0.5 * (v_xx + v_xx.T))


def backward_sweep(records: list, evaluation: _Evaluation,
                   reg: float, max_shifts: int = 60):
    """One value-function recursion; returns feedforwards, gains, the expected
    cost decrease model, and the regularization actually used."""
    n_x = records[0].belief.dim
    v_x = evaluation.aug_terminal.gradient_at_zero()[:n_x]
    v_xx = evaluation.aug_terminal.hessian_at_zero()[:n_x, :n_x]

    feeds, gains = [], []
    dv1 = dv2 = 0.0
    for k in range(len(records) - 1, -1, -1):
        rec = records[k]
        jac = rec.f_poly.jacobian_at_zero()
        f_x, f_u = jac[:, :n_x], jac[:, n_x:]
        hess = rec.f_poly.hessians_at_zero()
        l_x, l_u, l_xx, l_uu, l_ux = _scalar_blocks(evaluation.stages[k].aug_poly, n_x)

        q_x = l_x + f_x.T @ v_x
        q_u = l_u + f_u.T @ v_x
        q_xx_gn = l_xx + f_x.T @ v_xx @ f_x
        q_uu_gn = l_uu + f_u.T @ v_xx @ f_u
        q_ux_gn = l_ux + f_u.T @ v_xx @ f_x
        # Second-order dynamics terms; dropped per stage (Gauss-Newton model)
        # whenever they destroy the positive definiteness of the control block
        # or of the propagated value Hessian.
        vh = np.tensordot(v_x, hess, axes=(0, 0))
        q_xx = 0.5 * ((q_xx_gn + vh[:n_x, :n_x]) + (q_xx_gn + vh[:n_x, :n_x]).T)
        q_uu = 0.5 * ((q_uu_gn + vh[n_x:, n_x:]) + (q_uu_gn + vh[n_x:, n_x:]).T)
        q_ux = q_ux_gn + vh[n_x:, :n_x]

        shift_cap = 1e6 * (1.0 + abs(float(np.trace(q_uu))) / q_uu.shape[0])
        chol, shift = _try_cholesky(q_uu, reg, shift_cap)
        if chol is not None:
            step = _stage_solution(q_x, q_u, q_xx, q_uu, q_ux, chol, shift)
        else:
            q_uu_gn = 0.5 * (q_uu_gn + q_uu_gn.T)
            chol, shift = _try_cholesky(q_uu_gn, reg, np.inf)
            if chol is None:
                raise SolverError(f"control Hessian indefinite at stage {k}")
            step = _stage_solution(
                q_x, q_u, 0.5 * (q_xx_gn + q_xx_gn.T), q_uu_gn, q_ux_gn,
                chol, shift)

        a_k, k_k, v_x, v_xx = step
        reg = max(reg, shift)
        dv1 += a_k @ q_u
        dv2 += 0.5 * a_k @ q_uu @ a_k
        feeds.append(a_k)
        gains.append(k_k)

    feeds.reverse()
    gains.reverse()
    return feeds, gains, (dv1, dv2), reg


def policy_gradient(records: list, evaluation: _Evaluation) -> list:
    """Merit gradient with respect to the feedforward controls.

    Plain adjoint recursion under the current (frozen) feedback gains -- no
    value-Hessian terms, so the result is the exact first-order sensitivity
    of the augmented cost along the closed-loop trajectory.
    """
    n_x = records[0].belief.dim
    p = evaluation.aug_terminal.gradient_at_zero()[:n_x]
    grads = [None] * len(records)
    for k in range(len(records) - 1, -1, -1):
        rec = records[k]
        jac = rec.f_poly.jacobian_at_zero()
        f_x, f_u = jac[:, :n_x], jac[:, n_x:]
        grad = evaluation.stages[k].aug_poly.gradient_at_zero()
        l_x, l_u = grad[:n_x], grad[n_x:]
        grads[k] = l_u + f_u.T @ p
        p = l_x + rec.K.T @ l_u + (f_x + f_u @ rec.K).T @ p
    return grads


def _gradient_feeds(records: list, evaluation: _Evaluation, reg: float) -> list:
    """Descent direction from the merit gradient, preconditioned per stage by
    the local control curvature of the augmented cost."""
    n_x = records[0].belief.dim
    grads = policy_gradient(records, evaluation)
    out = []
    for k in range(len(records)):
        _, _, _, l_uu, _ = _scalar_blocks(evaluation.stages[k].aug_poly, n_x)
        l_uu = 0.5 * (l_uu + l_uu.T)
        chol, _ = _try_cholesky(l_uu, max(reg, 1e-8), np.inf)
        out.append(-np.linalg.solve(chol.T, np.linalg.solve(chol, grads[k])))
    return out


# -- forward pass -----------------------------------------------------------------


def _pin_const(pv: PolyVector, values: np.ndarray) -> PolyVector:
    out = []
    for p, v in zip(pv, values):
        coeffs = p.coeffs.copy()
        coeffs[0] = v
        out.append(TruncatedPolynomial(p.table, coeffs))
    return PolyVector(out)


def _recenter(model: StageModel, rec: StageRecord, dx: np.ndarray,
              du: np.ndarray, opts: SolverOptions,
              order: int | None = None) -> tuple[PolyVector, float, np.ndarray]:
    """Recenter a stage expansion at a displaced point.

    Uses the fast Taylor shift when the displacement lies inside the estimated
    validity radius, re-expanding from scratch otherwise.  The constant part is
    always pinned to the exact propagation so nominal trajectories never drift
    from the true dynamics.  A lower ``order`` override re-expands cheaply
    instead of shifting; constants and first derivatives are exact at any
    order, so everything the merit needs is unchanged.
    """
    delta = np.concatenate([dx, du])
    x_new = rec.belief.mean + dx
    u_new = rec.u + du
    x_next = np.array(model.step(list(x_new), list(u_new)), dtype=float)
    step_norm = float(np.linalg.norm(delta))
    if order is not None and order < opts.order:
        if step_norm == 0.0 and rec.f_poly.order <= order:
            return rec.f_poly, rec.radius, x_next
        # The validity radius is meaningless at first order and unused by the
        # merit evaluation, so skip its estimate.
        pv = expand_map(model.step, x_new, u_new, order=order)
        return pv, 0.0, x_next
    if step_norm == 0.0:
        return rec.f_poly, rec.radius, x_next
    if step_norm < rec.radius:
        pv = _pin_const(rec.f_poly.shift(delta), x_next)
        return pv, rec.radius - step_norm, x_next
    pv, radius = expand_stage(model, x_new, u_new, opts.eps_da, opts.order)
    return pv, radius, x_next


def forward_rollout(model: StageModel, records: list, feeds: list, gains: list,
                    kappa: float, opts: SolverOptions,
                    order: int | None = None) -> tuple[list, GaussianBelief]:
    """Apply du = kappa*a + K_blend*dx along the trajectory; rebuild records.

    The step length damps the gain update as well as the feedforward
    (K_blend = K_old + kappa*(K_new - K_old)), so a vanishing step reproduces
    the previous iterate exactly -- gains, covariance chain and margins
    included -- and the merit comparison in the line search is continuous in
    kappa.  Covariances are re-propagated under the blended gains.
    """
    new_records = []
    x = records[0].belief.mean.copy()
    for k, rec in enumerate(records):
        dx = x - rec.belief.mean
        k_blend = rec.K + kappa * (gains[k] - rec.K)
        du = kappa * feeds[k] + k_blend @ dx
        pv, radius, x_next = _recenter(model, rec, dx, du, opts, order)
        new_records.append(StageRecord(GaussianBelief(x, rec.belief.cov),
                                       rec.u + du, k_blend, pv, radius))
        x = x_next
    return repropagate_beliefs(model, new_records, records[0].belief.cov)


def repropagate_beliefs(model: StageModel, records: list,
                        cov0: np.ndarray) -> tuple[list, GaussianBelief]:
    """Refresh the covariance chain under the current gains and expansions."""
    cov = cov0
    out = []
    for rec in records:
        out.append(StageRecord(GaussianBelief(rec.belief.mean, cov),
                               rec.u, rec.K, rec.f_poly, rec.radius))
        cov = propagate_belief(out[-1], model.process_noise).cov
    terminal = GaussianBelief(out[-1].f_poly.const(), cov)
    return out, terminal


def initial_trajectory(model: StageModel, x0: GaussianBelief,
                       controls: np.ndarray, opts: SolverOptions) -> TrajectoryIterate:
    """Build stage records from an initial control guess with zero gains."""
    records = []
    x = x0.mean.copy()
    zero_k = np.zeros((model.n_u, model.n_x))
    for k in range(model.n_stages):
        u = np.asarray(controls[k], dtype=float)
        pv, radius = expand_stage(model, x, u, opts.eps_da, opts.order)
        records.append(StageRecord(GaussianBelief(x, x0.cov), u, zero_k, pv, radius))
        x = np.array(model.step(list(x), list(u)), dtype=float)
    records, terminal = repropagate_beliefs(model, records, x0.cov)
    return TrajectoryIterate(model, records, terminal)


# -- outer loop -------------------------------------------------------------------


def _ddp_minimize(model, trajectory, xt, aul, opts, log, max_inner):
    """Inner DDP loop at fixed multipliers; returns (trajectory, eval, n_iter)."""
    records, terminal = trajectory.records, trajectory.terminal
    evaluation = _evaluate(model, records, terminal, xt, aul, opts)
    reg = opts.reg_init
    n_iter = 0
    for _ in range(max_inner):
        feeds, gains, _dv, reg = backward_sweep(records, evaluation, reg)
        a_max = max(float(np.max(np.abs(a))) for a in feeds)
        if a_max <= opts.eps_ddp:
            break
        accepted = kappa = None
        # Three step candidates, from fastest to safest: the full step with
        # updated gains; the same feedforward under the current gains (merit
        # exactly continuous in the step length, so gain-induced margin
        # changes cannot mask the improvement); and a preconditioned merit
        # gradient under the current gains, which is a certified descent
        # direction when the quadratic model is too distorted to give one.
        frozen = [rec.K for rec in records]
        candidates = [(feeds, gains), (feeds, frozen)]
        # Trials run on first-order re-expansions: constants and first
        # derivatives are exact at any truncation order, so the trial merit
        # equals the full-order merit while skipping the expensive high-order
        # dynamics expansion.  The winning step is re-expanded in full below.
        trial_opts = replace(opts, order=min(opts.order, 1))
        for i_cand, (trial_feeds, trial_gains) in enumerate(candidates):
            kappa = 1.0
            for _ls in range(opts.max_line_search):
                trial_records, trial_terminal = forward_rollout(
                    model, records, trial_feeds, trial_gains, kappa, opts,
                    order=trial_opts.order)
                trial_eval = _evaluate(model, trial_records, trial_terminal,
                                       xt, aul, trial_opts)
                if trial_eval.merit < evaluation.merit:
                    accepted = (trial_feeds, trial_gains)
                    break
                kappa *= opts.zeta
            if accepted is not None:
                break
            if i_cand == len(candidates) - 1 and len(candidates) == 2:
                candidates.append((_gradient_feeds(records, evaluation, reg),
                                   frozen))
        if accepted is None:
            reg = max(10.0 * reg, 1e-4)
            if reg > 1e16:
                # No direction improves the merit even under heavy damping:
                # the iterate is as good as the local model allows, so hand
                # control back to the multiplier update.
                break
            continue
        prev_merit = evaluation.merit
        step_feeds, step_gains = accepted
        records, terminal = forward_rollout(model, records, step_feeds,
                                            step_gains, kappa, opts)
        evaluation = _evaluate(model, records, terminal, xt, aul, opts)
        n_iter += 1
        reg = max(reg * 0.5, opts.reg_floor) if reg > opts.reg_floor else 0.0
        log.append({"phase": "ddp", "iteration": n_iter, "kappa": kappa,
                    "merit": evaluation.merit, "cost": evaluation.quantile_cost,
                    "g_max": evaluation.g_max, "reg": reg})
        if abs(prev_merit - evaluation.merit) < opts.eps_ddp:
            break
    return TrajectoryIterate(model, records, terminal), evaluation, n_iter


def aul_solve(model: StageModel, x0: GaussianBelief, xt: GaussianBelief,
              controls0: np.ndarray | None = None,
              opts: SolverOptions | None = None,
              aul0: AulState | None = None,
              initial: "TrajectoryIterate | None" = None) -> AulResult:
    """Solve one trajectory problem to feasibility and local optimality.

    Runs the inner DDP loop to convergence, then updates the inequality
    multipliers, escalating the penalty whenever the worst violation fails to
    halve, until every tightened constraint is satisfied within ``eps_aul``.
    A prebuilt ``initial`` trajectory (e.g. a warm start) takes precedence
    over ``controls0``.
    """
    opts = opts or SolverOptions()
    if initial is not None:
        trajectory = initial
    else:
        if controls0 is None:
            controls0 = np.zeros((model.n_stages, model.n_u))
        trajectory = initial_trajectory(model, x0, np.asarray(controls0, float), opts)
    n_g = model.n_path_constraints
    aul = aul0 or AulState(np.zeros((model.n_stages, n_g)), 0.0, opts.mu_init)

    log: list = []
    total_inner = 0
    prev_violation = np.inf
    evaluation = None
    for outer in range(1, opts.max_outer + 1):
        trajectory, evaluation, n_iter = _ddp_minimize(
            model, trajectory, xt, aul, opts, log, opts.max_inner)
        total_inner += n_iter
        violation = max(0.0, float(np.max(evaluation.residuals, initial=0.0)))
        log.append({"phase": "aul", "iteration": outer, "mu": aul.mu,
                    "violation": violation, "cost": evaluation.quantile_cost})
        if violation <= opts.eps_aul:
            return AulResult(trajectory, evaluation.quantile_cost,
                             evaluation.nominal_cost, evaluation.g_max,
                             outer, total_inner, True, aul, log,
                             evaluation.residuals)
        lam = aul.lam.copy()
        for k, stage in enumerate(evaluation.stages):
            for i, g in enumerate(stage.g_polys):
                lam[k, i] = max(0.0, lam[k, i] + aul.mu * g.const)
        lam_t = aul.lam_terminal
        if evaluation.g_terminal is not None:
            lam_t = max(0.0, lam_t + aul.mu * evaluation.g_terminal.const)
        mu = aul.mu
        if violation > 0.5 * prev_violation and mu < opts.mu_max:
            mu = min(mu * opts.mu_scale, opts.mu_max)
        aul = AulState(lam, lam_t, mu)
        prev_violation = violation

    return AulResult(trajectory, evaluation.quantile_cost,
                     evaluation.nominal_cost, evaluation.g_max,
                     opts.max_outer, total_inner, False, aul, log,
                     evaluation.residuals)
