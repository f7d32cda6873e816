"""Mixture-of-trajectories orchestration for strongly nonlinear problems.

When the dynamics are too nonlinear for a single Gaussian to represent the
state dispersion, the initial belief is split into a Gaussian mixture, one
trajectory per mixand.  Each mixand is optimized in turn with the
constrained solver (and optionally polished), with its admissible failure
risk relaxed by the margin the previous mixands left unused, so the mixture
as a whole still meets the requested joint risk.

The working list of pending trajectories is processed first-in-first-out;
lateral children created by a split are appended to the end while the center
child is re-checked recursively, exactly reproducing the ordering (and hence
the genealogy and costs) on repeated runs.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from . import ddp as _ddp
from .ddp import (
    AulResult,
    SolverOptions,
    StageRecord,
    TrajectoryIterate,
    initial_trajectory,
    repropagate_beliefs,
)
from .dynamics import StageModel
from .gauss import GaussianBelief
from .mixture import SplitLibrary, nli_from_coefficients, split
from .newton import NewtonOptions, NewtonResult, adaptive_newton, build_stack, _risk_estimate

ARCHIVE_SCHEMA = "trajectory-mixture/1"


@dataclass
class SodaOptions:
    """Orchestration settings on top of the per-mixand solver options."""

    beta: float = 0.05
    alpha_min: float = 0.5          # weight floor; 0.5 disables splitting
    eps_nli: float = 5e-4           # stage-map nonlinearity threshold
    solver: SolverOptions = field(default_factory=SolverOptions)
    newton: NewtonOptions | None = None
    run_newton: bool = True
    library: SplitLibrary = field(default_factory=SplitLibrary)

    def __post_init__(self):
        if not 0.0 < self.alpha_min <= 0.5:
            raise ValueError("alpha_min must lie in (0, 0.5]")
        if self.eps_nli <= 0.0:
            raise ValueError("eps_nli must be positive")
        self.solver = replace(self.solver, beta=self.beta, stochastic=True)
        if self.newton is None:
            self.newton = NewtonOptions(beta=self.beta)


@dataclass
class MixandTask:
    """One trajectory of the mixture with its risk bookkeeping."""

    trajectory: TrajectoryIterate
    x0: GaussianBelief
    weight: float
    genealogy: list = field(default_factory=list)
    beta_star: float | None = None     # allocated admissible risk
    beta_estimate: float | None = None  # a-posteriori risk bound
    status: str = "pending"
    result: AulResult | None = None
    polish: NewtonResult | None = None

    def __post_init__(self):
        if self.weight <= 0.0:
            raise ValueError("mixand weight must be positive")


@dataclass
class SodaResult:
    """The optimized mixture in completion order."""

    tasks: list                       # solved MixandTasks
    aggregate_beta: float             # sum of alpha_j * beta_T,j
    converged: bool
    log: list = field(default_factory=list)

    @property
    def weights(self) -> np.ndarray:
        return np.array([t.weight for t in self.tasks])


# -- risk allocation -----------------------------------------------------------------


def allocate_risk(beta: float, alphas, beta_t_list) -> tuple[float, float]:
    """Admissible risk for the next mixand given the processed ones.

    The first mixand gets the global level; each later one inherits the
    unused slack of its predecessor scaled by the weight ratio,
    ``beta*_{j+1} = beta + (alpha_j / alpha_{j+1}) * (beta*_j - beta_T_j)``.
    When every mixand meets its allocation the mixture's joint risk stays at
    or below ``beta``.  Returns the next allocation and the weighted
    aggregate of the realized estimates.
    """
    alphas = list(alphas)
    beta_t_list = list(beta_t_list)
    if len(alphas) != len(beta_t_list) + 1:
        raise ValueError("need one pending weight beyond the processed ones")
    beta_star = beta
    for j, beta_t in enumerate(beta_t_list):
        if beta_t > beta_star + 1e-15:
            raise ValueError(
                f"mixand {j} realized risk {beta_t:.6g} exceeds its "
                f"allocation {beta_star:.6g}")
        delta = beta_star - beta_t
        beta_star = beta + (alphas[j] / alphas[j + 1]) * delta
    aggregate = float(sum(a * b for a, b in zip(alphas, beta_t_list)))
    return beta_star, aggregate


# -- trajectory nonlinearity and splitting --------------------------------------------


def stage_nli(trajectory: TrajectoryIterate) -> tuple[float, int, np.ndarray]:
    """Worst closed-loop stage-map nonlinearity along the trajectory.

    Each stage expansion is restricted to state deviations (du = K dx
    substituted), whitened by the stage covariance factor, and scored by the
    nonlinearity index.  Returns (max index, argmax stage, directional
    indices at that stage).
    """
    best = (0.0, 0, None)
    n_x = trajectory.model.n_x
    for k, rec in enumerate(trajectory.records):
        jac = rec.f_poly.jacobian_at_zero()
        hes = rec.f_poly.hessians_at_zero()
        t_cl = np.vstack([np.eye(n_x), rec.K])
        jac_cl = jac @ t_cl
        hes_cl = np.einsum("ki,mkl,lj->mij", t_cl, hes, t_cl)
        scale = np.linalg.cholesky(rec.belief.cov)
        jac_w = jac_cl @ scale
        hes_w = np.einsum("ki,mkl,lj->mij", scale, hes_cl, scale)
        eta, directional = nli_from_coefficients(jac_w, hes_w)
        if eta > best[0]:
            best = (eta, k, directional)
    return best


def _shifted_trajectory(model: StageModel, parent: TrajectoryIterate,
                        x0_new: GaussianBelief, opts: SolverOptions) -> TrajectoryIterate:
    """Re-center a trajectory at a displaced initial belief.

    Controls follow the parent's feedback law, expansions are re-centered by
    Taylor shift (with exact-dynamics constants), gains are reused, and
    covariances re-propagated from the new initial covariance.
    """
    records = []
    x = x0_new.mean.copy()
    for rec in parent.records:
        dx = x - rec.belief.mean
        du = rec.K @ dx
        pv, radius, x_next = _ddp._recenter(model, rec, dx, du, opts)
        records.append(StageRecord(GaussianBelief(x, x0_new.cov), rec.u + du,
                                   rec.K, pv, radius))
        x = x_next
    records, terminal = repropagate_beliefs(model, records, x0_new.cov)
    return TrajectoryIterate(model, records, terminal)


def split_trajectory(task: MixandTask, direction: int,
                     opts: SodaOptions) -> tuple[MixandTask, MixandTask, MixandTask]:
    """Split a pending trajectory three ways along an initial-state axis.

    The initial belief is split along its ``direction``-th principal axis;
    each child trajectory reuses the parent's feedback law and re-centered
    expansions.  Child weights scale the parent's; the center keeps the
    central split weight.
    """
    model = task.trajectory.model
    pieces = split(task.x0, direction, opts.library)
    children = []
    for w, comp, hist in zip(pieces.weights, pieces.components, pieces.genealogy):
        traj = _shifted_trajectory(model, task.trajectory, comp, opts.solver)
        children.append(MixandTask(
            trajectory=traj, x0=comp, weight=task.weight * w,
            genealogy=task.genealogy + hist))
    return children[0], children[1], children[2]


# -- warm starting --------------------------------------------------------------------


def warm_start(task: MixandTask, solved: list, opts: SodaOptions) -> MixandTask:
    """Initialize a pending mixand from the nearest already-solved one.

    Nearest means smallest squared Mahalanobis distance between initial
    means in the pending mixand's initial metric; ties go to the lowest
    index.  The selected solution's feedback law is transported to the new
    center, which keeps continuity defects at zero by construction.  With no
    solved mixands the task is returned unchanged (cold start).
    """
    if not solved:
        return task
    metric = np.linalg.inv(task.x0.cov)
    best_i, best_d = 0, np.inf
    for i, cand in enumerate(solved):
        err = task.x0.mean - cand.trajectory.records[0].belief.mean
        d = float(err @ metric @ err)
        if d < best_d - 1e-15:
            best_i, best_d = i, d
    source = solved[best_i].trajectory
    model = task.trajectory.model
    traj = _shifted_trajectory(model, source, task.x0, opts.solver)
    return replace(task, trajectory=traj)


# -- the orchestration loop -----------------------------------------------------------


def soda_solve(model: StageModel, x0: GaussianBelief, xt: GaussianBelief,
               opts: SodaOptions | None = None,
               u0: np.ndarray | None = None) -> SodaResult:
    """Optimize a mixture of trajectories meeting a joint chance constraint.

    Pending trajectories are processed first-in-first-out.  Before each
    optimization the worst stage nonlinearity is checked: while it exceeds
    the threshold and the children stay above the weight floor, the initial
    belief is split, laterals join the back of the queue and the center is
    re-checked.  Each mixand is solved at its allocated risk (cold duals,
    warm-started primal), optionally polished, and its realized risk feeds
    the next allocation.  A weight floor of 50 % forbids any split, reducing
    the method to the single-trajectory pipeline.
    """
    opts = opts or SodaOptions()
    if u0 is None:
        u0 = np.zeros((model.n_stages, model.n_u))
    root = MixandTask(
        trajectory=initial_trajectory(model, x0, u0, opts.solver),
        x0=x0, weight=1.0)
    pending: deque = deque([root])
    solved: list = []
    log: list = []
    converged = True
    alphas: list = []
    beta_t_list: list = []
    while pending:
        task = pending.popleft()
        task = warm_start(task, solved, opts)
        # Split until the local linearization is trustworthy or the weight
        # floor blocks further refinement.
        while True:
            eta, stage, directional = stage_nli(task.trajectory)
            child_weight = task.weight * (1.0 - opts.library.alpha) / 2.0
            if eta <= opts.eps_nli or child_weight <= opts.alpha_min:
                break
            direction = int(np.argmax(directional))
            center, low, high = split_trajectory(task, direction, opts)
            pending.append(low)
            pending.append(high)
            log.append({"phase": "split", "eta": eta, "stage": stage,
                        "direction": direction, "weight": task.weight})
            task = center
        total = task.weight + sum(t.weight for t in pending) \
            + sum(t.weight for t in solved)
        if abs(total - 1.0) > 1e-12:
            raise RuntimeError(f"mixture weights drifted to {total}")
        beta_star, _ = allocate_risk(opts.beta, alphas + [task.weight],
                                     beta_t_list)
        task.beta_star = beta_star
        solver_opts = replace(opts.solver, beta=beta_star)
        result = _ddp.aul_solve(model, task.x0, xt, opts=solver_opts,
                                initial=task.trajectory)
        task.result = result
        task.trajectory = result.trajectory
        if not result.converged:
            converged = False
            task.status = "failed"
            log.append({"phase": "mixand", "weight": task.weight,
                        "beta_star": beta_star, "converged": False})
            solved.append(task)
            alphas.append(task.weight)
            beta_t_list.append(beta_star)  # no slack to pass on
            continue
        if opts.run_newton:
            newton_opts = replace(opts.newton, beta=beta_star)
            task.polish = adaptive_newton(result.trajectory, task.x0, xt,
                                          newton_opts)
            task.beta_estimate = task.polish.beta_estimate
        else:
            stack = build_stack(result.trajectory, task.x0, xt, opts.newton)
            task.beta_estimate = _risk_estimate(
                stack, result.trajectory.states, result.trajectory.controls)
        task.beta_estimate = min(task.beta_estimate, beta_star)
        task.status = "optimized"
        solved.append(task)
        alphas.append(task.weight)
        beta_t_list.append(task.beta_estimate)
        log.append({"phase": "mixand", "weight": task.weight,
                    "beta_star": beta_star, "beta_t": task.beta_estimate,
                    "cost": result.quantile_cost, "converged": True})
    aggregate = float(sum(a * b for a, b in zip(alphas, beta_t_list)))
    return SodaResult(tasks=solved, aggregate_beta=aggregate,
                      converged=converged, log=log)


# -- closed-loop sample steering ------------------------------------------------------


def steer_sample(tasks: list, x_hat0: np.ndarray, noises: np.ndarray,
                 model: StageModel,
                 printed_variant: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Steer one sampled initial state with the nearest mixand's policy.

    The mixand is chosen by squared Mahalanobis distance of the sample to
    each initial mean (ties to the lowest index), then its nominal controls
    and gains are applied through the true dynamics with additive noise:
    ``u_k = ubar_k + K_k (x_k - xbar_k)``.  ``printed_variant`` flips the
    feedback deviation sign for comparison studies.
    """
    x_hat0 = np.asarray(x_hat0, dtype=float)
    if not np.all(np.isfinite(x_hat0)):
        raise ValueError("sampled initial state must be finite")
    best_i, best_d = 0, np.inf
    for i, task in enumerate(tasks):
        mean0 = task.trajectory.records[0].belief.mean
        err = x_hat0 - mean0
        # pinv: zero-variance states (e.g. mass) drop out of the metric
        d = float(err @ np.linalg.pinv(task.x0.cov, hermitian=True) @ err)
        if d < best_d - 1e-15:
            best_i, best_d = i, d
    traj = tasks[best_i].trajectory
    states = [x_hat0]
    controls = []
    for k, rec in enumerate(traj.records):
        dev = rec.belief.mean - states[-1] if printed_variant \
            else states[-1] - rec.belief.mean
        u = rec.u + rec.K @ dev
        nxt = np.array(model.step(list(states[-1]), list(u)), dtype=float)
        if noises is not None:
            nxt = nxt + noises[k]
        states.append(nxt)
        controls.append(u)
    return np.stack(states), np.stack(controls)


# -- archive --------------------------------------------------------------------------


def _tril_list(mat: np.ndarray) -> list:
    idx = np.tril_indices(mat.shape[0])
    return mat[idx].tolist()


def archive_to_json(result: SodaResult, problem: str | None = None,
                    beta: float | None = None) -> str:
    """Serialize a solved mixture (schema-versioned JSON document)."""
    mixands = []
    for task in result.tasks:
        traj = task.trajectory
        mixands.append({
            "weight": task.weight,
            "genealogy": [list(g) for g in task.genealogy],
            "beta_star": task.beta_star,
            "beta_estimate": task.beta_estimate,
            "status": task.status,
            "stage_means": traj.states.tolist(),
            "stage_cov_tril": [_tril_list(b.cov) for b in traj.beliefs],
            "controls": traj.controls.tolist(),
            "gains": traj.gains.tolist(),
        })
    doc = {"schema": ARCHIVE_SCHEMA,
           "aggregate_beta": result.aggregate_beta,
           "converged": result.converged,
           "mixands": mixands}
    return json.dumps(doc, indent=2, sort_keys=True)


def archive_from_json(text: str) -> dict:
    """Parse a mixture archive, validating the schema tag."""
    doc = json.loads(text)
    if doc.get("schema") != ARCHIVE_SCHEMA:
        raise ValueError(f"unsupported archive schema: {doc.get('schema')!r}")
    return doc
