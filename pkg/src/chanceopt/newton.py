"""Feasibility polishing of a converged trajectory by projected Newton steps.

The penalty-based solver leaves a small residual violation of the tightened
constraints.  This module stacks the active tightened inequalities together
with the dynamics continuity equalities into one constraint vector over the
full decision trajectory, and drives it to machine-level feasibility with
minimum-norm Newton steps.  The tightening margins carry a relaxation factor
``tau`` that is adapted until an a-posteriori risk estimate of the polished
trajectory lands in a dead band around the requested risk level.

The normal-matrix solves exploit the block-tridiagonal coupling of the stack:
rows of stage ``k`` only share decision variables with stages ``k - 1`` and
``k + 1``, so the Cholesky factorization runs in time linear in the horizon
and quadratic in the per-stage block size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .dynamics import StageModel, expand_map, expand_scalar
from .gauss import GaussianBelief, tail_radius
from .transcribe import TranscriptionKind, dth_order_risk_from_ratios
from .ddp import TrajectoryIterate, terminal_constraint_poly, transcribe_polys


@dataclass
class NewtonOptions:
    """Tolerances and schedule of the polishing loop."""

    beta: float = 0.05                 # joint risk level of the margins
    beta_terminal: float | None = None  # defaults to beta
    eps_newton: float = 1e-10          # max transcribed violation at exit
    eps_active: float = 1e-8           # activity threshold on transcribed values
    eps_contraction: float = 0.5       # stop when log-residual ratio stalls
    zeta: float = 0.5                  # backtracking factor
    tau_init: float = 1.0              # initial margin relaxation
    max_outer: int = 20                # relaxation updates
    max_inner: int = 50                # Newton steps per relaxation level
    max_line_search: int = 40
    order: int = 1                     # expansion order for jacobians

    @property
    def beta_t(self) -> float:
        return self.beta if self.beta_terminal is None else self.beta_terminal


@dataclass
class ConstraintStack:
    """Active tightened constraints plus continuity, stacked over the horizon.

    The decision vector is ``Y = [u_0, x_1, u_1, ..., u_{N-1}, x_N]``; the
    initial state is a parameter, not a variable.  Row group ``k`` holds the
    continuity equality ``x_{k+1} - f(x_k, u_k)`` followed by the active
    inequalities of stage ``k`` (and the terminal inequality in the last
    group), so the jacobian couples only neighbouring variable blocks.
    """

    model: StageModel
    gains: np.ndarray                  # (N, n_u, n_x) frozen feedback gains
    x0: GaussianBelief
    xt: GaussianBelief
    beta: float
    beta_terminal: float
    active: list                       # per-stage active inequality indices
    terminal_active: bool
    order: int = 1

    @property
    def n_stages(self) -> int:
        return self.model.n_stages

    @property
    def block_size(self) -> int:
        return self.model.n_u + self.model.n_x

    @property
    def n_stochastic(self) -> int:
        return sum(len(a) for a in self.active) + int(self.terminal_active)

    @property
    def margin_multiplier(self) -> float:
        """Joint-dimension inverse-tail radius shared by every tightened row."""
        d = max(self.n_stochastic, 1)
        return tail_radius(d, self.beta)

    def pack(self, states: np.ndarray, controls: np.ndarray) -> np.ndarray:
        parts = []
        for k in range(self.n_stages):
            parts.append(controls[k])
            parts.append(states[k + 1])
        return np.concatenate(parts)

    def unpack(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n_x, n_u, n_b = self.model.n_x, self.model.n_u, self.block_size
        states = np.empty((self.n_stages + 1, n_x))
        controls = np.empty((self.n_stages, n_u))
        states[0] = self.x0.mean
        for k in range(self.n_stages):
            states[k + 1] = y[k * n_b + n_u: (k + 1) * n_b]
            controls[k] = y[k * n_b: k * n_b + n_u]
        return states, controls


@dataclass
class _Linearization:
    """Jacobian blocks, residuals and margins of the stack at one trajectory."""

    groups: list            # per group k: (rows_prev, rows_here) jacobian blocks
    residual: np.ndarray    # violation vector (inequalities clamped at zero)
    sigma: np.ndarray       # per stochastic row deviation, stacking order of rows
    means: np.ndarray       # untightened values of the stochastic rows
    covs: list              # state covariances Sigma_{x,0..N}


@dataclass
class NewtonResult:
    """Polished trajectory with the relaxation level and risk estimate."""

    states: np.ndarray
    controls: np.ndarray
    gains: np.ndarray
    tau: float
    beta_estimate: float
    d_max: float
    n_iterations: int
    converged: bool
    log: list = field(default_factory=list)


# -- sparse stacked deviations -------------------------------------------------------


def sigma_gamma_diag(grad_x: list, grad_u: list, gains: np.ndarray,
                     covs: list) -> np.ndarray:
    """Per-row standard deviations of stacked stage constraints.

    For each stage ``k`` with rows ``g_k`` of jacobians ``(g_x, g_u)``, the
    closed-loop sensitivity is ``D_k = g_x + g_u K_k`` and the variance of row
    ``i = q * n_g + r`` is the ``r``-th diagonal entry of ``D_q Sigma_q D_q^T``,
    obtained as the product of row ``r`` of ``D_q`` with column ``r`` of
    ``P_q = Sigma_q D_q^T`` — never forming the full stacked covariance.
    """
    out = []
    for q in range(len(grad_x)):
        gx, gu = np.atleast_2d(grad_x[q]), np.atleast_2d(grad_u[q])
        if gx.shape[0] == 0:
            continue
        d_q = gx + gu @ gains[q]
        p_q = covs[q] @ d_q.T
        n_g = d_q.shape[0]
        for r in range(n_g):
            out.append(math.sqrt(max(float(d_q[r] @ p_q[:, r]), 0.0)))
    return np.array(out)


# -- block-tridiagonal Cholesky ------------------------------------------------------


def block_cholesky_solve(diag: list, lower: list, rhs: np.ndarray) -> np.ndarray:
    """Solve a symmetric positive-definite block-tridiagonal system.

    ``diag[k]`` are the diagonal blocks, ``lower[k]`` the block below
    ``diag[k]`` (length one less).  The factorization and the two sweeps cost
    O(n_blocks * block_size^3); a singular pivot block raises with the block
    index so callers can report the offending stage.
    """
    n = len(diag)
    chols, offs = [], []
    splits = np.cumsum([b.shape[0] for b in diag])[:-1]
    segs = np.split(np.asarray(rhs, dtype=float), splits)
    ys = []
    for k in range(n):
        d_k = diag[k]
        r_k = segs[k].copy()
        if k == 0:
            off = None
        else:
            # lower[k-1] L_{k-1}^{-T} via a triangular solve against the
            # previous pivot factor.
            off = solve_triangular(chols[k - 1], lower[k - 1].T, lower=True).T
            d_k = d_k - off @ off.T
            r_k -= off @ ys[k - 1]
        try:
            c_k = np.linalg.cholesky(0.5 * (d_k + d_k.T))
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(
                f"constraint normal matrix is singular at block {k}") from exc
        chols.append(c_k)
        offs.append(off)
        ys.append(solve_triangular(c_k, r_k, lower=True))
    xs = [None] * n
    for k in range(n - 1, -1, -1):
        z = ys[k]
        if k < n - 1:
            z = z - offs[k + 1].T @ xs[k + 1]
        xs[k] = solve_triangular(chols[k].T, z, lower=False)
    return np.concatenate(xs)


# -- stack construction --------------------------------------------------------------


def build_stack(trajectory: TrajectoryIterate, x0: GaussianBelief,
                xt: GaussianBelief, opts: NewtonOptions) -> ConstraintStack:
    """Freeze the active set of a converged trajectory into a polish stack.

    Activity is judged on the per-stage tightened values the solver enforced:
    a row is active when its tightened value exceeds ``-eps_active``.
    """
    model = trajectory.model
    active = []
    for rec in trajectory.records:
        idx = []
        if model.n_path_constraints:
            x_c, u_c = rec.belief.mean, rec.u
            polys = [
                expand_scalar(lambda xs, us, i=i: model.path_constraints(xs, us)[i],
                              x_c, u_c, order=2)
                for i in range(model.n_path_constraints)
            ]
            tight = transcribe_polys(polys, rec.K, rec.belief.cov, opts.beta,
                                     kind=TranscriptionKind.FIRST_ORDER, margin_derivatives=False)
            idx = [i for i, t in enumerate(tight) if t.const > -opts.eps_active]
        active.append(np.array(idx, dtype=int))
    terminal_active = False
    g_t = terminal_constraint_poly(model, trajectory.terminal.mean, xt,
                                   opts.beta_t, order=2)
    if g_t is not None:
        zero_gain = np.zeros((model.n_u, model.n_x))
        tight = transcribe_polys([g_t], zero_gain, trajectory.terminal.cov,
                                 opts.beta_t, kind=TranscriptionKind.FIRST_ORDER,
                                 margin_derivatives=False)
        terminal_active = tight[0].const > -opts.eps_active
    return ConstraintStack(
        model=model, gains=trajectory.gains, x0=x0, xt=xt, beta=opts.beta,
        beta_terminal=opts.beta_t, active=active,
        terminal_active=terminal_active, order=opts.order)


def _propagate_covariances(stack: ConstraintStack,
                           states: np.ndarray, controls: np.ndarray,
                           f_jacs: list) -> list:
    covs = [stack.x0.cov]
    n_x = stack.model.n_x
    for k in range(stack.n_stages):
        f_x, f_u = f_jacs[k][:, :n_x], f_jacs[k][:, n_x:]
        a_cl = f_x + f_u @ stack.gains[k]
        cov = a_cl @ covs[-1] @ a_cl.T + stack.model.process_noise
        covs.append(0.5 * (cov + cov.T))
    return covs


def assemble(stack: ConstraintStack, states: np.ndarray, controls: np.ndarray,
             tau: float) -> _Linearization:
    """Linearize the stack at a trajectory and evaluate its tightened residual.

    Continuity rows report their signed defect; tightened inequality rows
    report the positive part of ``g + tau * multiplier * sigma``, so feasible
    rows do not pull the step.
    """
    model = stack.model
    n_x, n_u, n_b = model.n_x, model.n_u, stack.block_size
    mult = stack.margin_multiplier

    f_polys = [expand_map(model.step, states[k], controls[k], order=stack.order)
               for k in range(stack.n_stages)]
    f_jacs = [pv.jacobian_at_zero() for pv in f_polys]
    covs = _propagate_covariances(stack, states, controls, f_jacs)

    # Per-stage jacobians of the active rows, for the deviations and for Delta.
    grad_x, grad_u = [], []
    values = []
    for k in range(stack.n_stages):
        idx = stack.active[k]
        if len(idx) == 0:
            grad_x.append(np.zeros((0, n_x)))
            grad_u.append(np.zeros((0, n_u)))
            continue
        gx, gu, vals = [], [], []
        for i in idx:
            p = expand_scalar(lambda xs, us, i=i: model.path_constraints(xs, us)[i],
                              states[k], controls[k], order=1)
            grad = p.gradient_at_zero()
            gx.append(grad[:n_x])
            gu.append(grad[n_x:])
            vals.append(p.const)
        grad_x.append(np.stack(gx))
        grad_u.append(np.stack(gu))
        values.extend(vals)
    gains = list(stack.gains)
    covs_used = covs[:stack.n_stages]
    if stack.terminal_active:
        g_t = terminal_constraint_poly(model, states[-1], stack.xt,
                                       stack.beta_terminal, order=1)
        grad_t = g_t.gradient_at_zero()[:n_x]
        grad_x.append(grad_t[None, :])
        grad_u.append(np.zeros((1, n_u)))
        gains.append(np.zeros((n_u, n_x)))
        covs_used.append(covs[-1])
        values.append(g_t.const)
    sigma = sigma_gamma_diag(grad_x, grad_u, gains, covs_used)
    means = np.array(values)

    groups, residual = [], []
    row = 0
    for k in range(stack.n_stages):
        idx = stack.active[k]
        m_k = len(idx)
        last = stack.terminal_active and k == stack.n_stages - 1
        n_rows = n_x + m_k + int(last)
        a_k = np.zeros((n_rows, n_b))   # columns of block k-1: [u_{k-1}, x_k]
        b_k = np.zeros((n_rows, n_b))   # columns of block k:   [u_k, x_{k+1}]
        f_x, f_u = f_jacs[k][:, :n_x], f_jacs[k][:, n_x:]
        a_k[:n_x, n_u:] = -f_x
        b_k[:n_x, :n_u] = -f_u
        b_k[:n_x, n_u:] = np.eye(n_x)
        defect = states[k + 1] - np.array(
            model.step(list(states[k]), list(controls[k])), dtype=float)
        residual.extend(defect)
        if m_k:
            a_k[n_x:n_x + m_k, n_u:] = grad_x[k]
            b_k[n_x:n_x + m_k, :n_u] = grad_u[k]
            tight = means[row:row + m_k] + tau * mult * sigma[row:row + m_k]
            residual.extend(np.maximum(tight, 0.0))
            row += m_k
        if last:
            b_k[-1, n_u:] = grad_x[-1][0]
            tight = means[row] + tau * mult * sigma[row]
            residual.append(max(tight, 0.0))
            row += 1
        groups.append((a_k if k > 0 else None, b_k))
    return _Linearization(groups=groups, residual=np.array(residual),
                          sigma=sigma, means=means, covs=covs)


def _normal_blocks(lin: _Linearization) -> tuple[list, list]:
    diag, lower = [], []
    for k, (a_k, b_k) in enumerate(lin.groups):
        d_k = b_k @ b_k.T
        if a_k is not None:
            d_k = d_k + a_k @ a_k.T
        diag.append(d_k)
        if k > 0:
            a_k = lin.groups[k][0]
            b_prev = lin.groups[k - 1][1]
            lower.append(a_k @ b_prev.T)
    return diag, lower


def newton_step(lin: _Linearization, block_size: int) -> np.ndarray:
    """Minimum-norm step removing the linearized residual: -D^T (D D^T)^{-1} d."""
    diag, lower = _normal_blocks(lin)
    v = block_cholesky_solve(diag, lower, lin.residual)
    splits = np.cumsum([b.shape[0] for b in diag])[:-1]
    segs = np.split(v, splits)
    n = len(lin.groups)
    dy = np.zeros(n * block_size)
    for k, (a_k, b_k) in enumerate(lin.groups):
        dy[k * block_size:(k + 1) * block_size] -= b_k.T @ segs[k]
        if a_k is not None:
            dy[(k - 1) * block_size:k * block_size] -= a_k.T @ segs[k]
    return dy


# -- risk estimation and the adaptive relaxation loop --------------------------------


def _risk_estimate(stack: ConstraintStack, states: np.ndarray,
                   controls: np.ndarray) -> float:
    """Joint-risk upper bound over every tightened row of the trajectory."""
    model = stack.model
    n_x = model.n_x
    f_jacs = [expand_map(model.step, states[k], controls[k],
                         order=1).jacobian_at_zero()
              for k in range(stack.n_stages)]
    covs = _propagate_covariances(stack, states, controls, f_jacs)
    grad_x, grad_u, values, gains, covs_used = [], [], [], [], []
    for k in range(stack.n_stages):
        if model.n_path_constraints == 0:
            continue
        gx, gu = [], []
        for i in range(model.n_path_constraints):
            p = expand_scalar(lambda xs, us, i=i: model.path_constraints(xs, us)[i],
                              states[k], controls[k], order=1)
            grad = p.gradient_at_zero()
            gx.append(grad[:n_x])
            gu.append(grad[n_x:])
            values.append(p.const)
        grad_x.append(np.stack(gx))
        grad_u.append(np.stack(gu))
        gains.append(stack.gains[k])
        covs_used.append(covs[k])
    g_t = terminal_constraint_poly(model, states[-1], stack.xt,
                                   stack.beta_terminal, order=1)
    if g_t is not None:
        grad_x.append(g_t.gradient_at_zero()[None, :n_x])
        grad_u.append(np.zeros((1, model.n_u)))
        gains.append(np.zeros((model.n_u, n_x)))
        covs_used.append(covs[-1])
        values.append(g_t.const)
    if not values:
        return 0.0
    sigma = sigma_gamma_diag(grad_x, grad_u, gains, covs_used)
    means = np.array(values)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(sigma > 0.0, np.maximum(-means, 0.0) / sigma,
                          np.where(means < 0.0, np.inf, 0.0))
    finite = ratios[np.isfinite(ratios)]
    if finite.size == 0:
        return 0.0
    return dth_order_risk_from_ratios(finite, d=ratios.size)


def _inner_solve(stack: ConstraintStack, y: np.ndarray, tau: float,
                 opts: NewtonOptions, log: list) -> tuple[np.ndarray, float]:
    """Drive the tightened residual to eps_newton at a fixed relaxation level."""
    states, controls = stack.unpack(y)
    lin = assemble(stack, states, controls, tau)
    d_max = float(np.abs(lin.residual).max(initial=0.0))
    ratio = math.inf
    for _ in range(opts.max_inner):
        if d_max <= opts.eps_newton or ratio <= opts.eps_contraction:
            break
        dy = newton_step(lin, stack.block_size)
        kappa = 1.0
        trial_y = y + dy
        trial_states, trial_controls = stack.unpack(trial_y)
        trial_lin = assemble(stack, trial_states, trial_controls, tau)
        trial_max = float(np.abs(trial_lin.residual).max(initial=0.0))
        for _ in range(opts.max_line_search):
            if trial_max <= d_max:
                break
            kappa *= opts.zeta
            trial_y = y + kappa * dy
            trial_states, trial_controls = stack.unpack(trial_y)
            trial_lin = assemble(stack, trial_states, trial_controls, tau)
            trial_max = float(np.abs(trial_lin.residual).max(initial=0.0))
        if trial_max > d_max:
            break
        # Contraction rate of the residual on a log scale; a rate below the
        # threshold means the frozen active set cannot improve further.
        if trial_max <= 0.0:
            ratio = math.inf
        elif 0.0 < d_max < 1.0 and trial_max < 1.0:
            ratio = math.log(trial_max) / math.log(d_max)
        else:
            ratio = math.inf if trial_max < d_max else 0.0
        y, lin, d_max = trial_y, trial_lin, trial_max
        log.append({"phase": "newton", "tau": tau, "d_max": d_max,
                    "kappa": kappa})
    return y, d_max


def adaptive_newton(trajectory: TrajectoryIterate, x0: GaussianBelief,
                    xt: GaussianBelief,
                    opts: NewtonOptions | None = None) -> NewtonResult:
    """Polish a converged trajectory to tight feasibility at a calibrated risk.

    Alternates Newton projections onto the tightened constraint manifold with
    updates of the relaxation ``tau``: the margins are scaled down when the
    estimated risk is needlessly conservative and up when it exceeds the
    request, until the estimate sits inside the dead band
    ``[beta / 2, 2 * beta]``.
    """
    opts = opts or NewtonOptions()
    stack = build_stack(trajectory, x0, xt, opts)
    y = stack.pack(trajectory.states, trajectory.controls)
    tau = min(max(opts.tau_init, 0.0), 1.0)
    log: list = []
    beta_est = 0.0
    d_max = math.inf
    n_iter = 0
    for _ in range(opts.max_outer):
        n_iter += 1
        y, d_max = _inner_solve(stack, y, tau, opts, log)
        states, controls = stack.unpack(y)
        beta_est = _risk_estimate(stack, states, controls)
        log.append({"phase": "relaxation", "iteration": n_iter,
                    "d_max": d_max, "tau": tau, "beta_estimate": beta_est})
        if stack.n_stochastic == 0:
            break
        if opts.beta / 2.0 <= beta_est <= 2.0 * opts.beta:
            break
        step = (beta_est - opts.beta) ** 2 / 2.0
        if beta_est > 2.0 * opts.beta:
            new_tau = min(tau + step, 1.0)
        else:
            new_tau = max(tau - step, 0.0)
        if new_tau == tau:
            break
        tau = new_tau
    states, controls = stack.unpack(y)
    return NewtonResult(
        states=states, controls=controls, gains=np.array(stack.gains),
        tau=tau, beta_estimate=beta_est, d_max=d_max, n_iterations=n_iter,
        converged=d_max <= opts.eps_newton, log=log)
