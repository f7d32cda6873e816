"""Tests for the feasibility-polishing module (stacked Newton projection)."""

import time

import numpy as np
import pytest
from scipy.linalg import block_diag

from chanceopt import ddp, newton
from chanceopt.ddp import SolverOptions, StageRecord, TrajectoryIterate
from chanceopt.dynamics import build_problem, StageModel
from chanceopt.gauss import GaussianBelief
from chanceopt.newton import (
    ConstraintStack,
    NewtonOptions,
    adaptive_newton,
    assemble,
    block_cholesky_solve,
    build_stack,
    newton_step,
    sigma_gamma_diag,
)

from test_ddp import constrained_di_model


def random_block_tridiagonal(rng, sizes, shift=1e-2):
    """A random SPD block-tridiagonal matrix as (diag, lower, dense)."""
    n = sum(sizes)
    full = np.zeros((n, n))
    offs = np.cumsum([0] + list(sizes))
    for k, m in enumerate(sizes):
        a = rng.standard_normal((m, m + 3))
        full[offs[k]:offs[k + 1], offs[k]:offs[k + 1]] = a @ a.T + shift * np.eye(m)
        if k > 0:
            b = 0.1 * rng.standard_normal((m, sizes[k - 1]))
            full[offs[k]:offs[k + 1], offs[k - 1]:offs[k]] = b
            full[offs[k - 1]:offs[k], offs[k]:offs[k + 1]] = b.T
    diag = [full[offs[k]:offs[k + 1], offs[k]:offs[k + 1]] for k in range(len(sizes))]
    lower = [full[offs[k]:offs[k + 1], offs[k - 1]:offs[k]]
             for k in range(1, len(sizes))]
    return diag, lower, full


class TestBlockCholesky:
    def test_matches_dense_solve(self):
        rng = np.random.default_rng(7)
        for sizes in [(3, 3, 3), (2, 5, 1, 4), (6,), (1, 1, 1, 1, 1)]:
            diag, lower, full = random_block_tridiagonal(rng, sizes, shift=1.0)
            rhs = rng.standard_normal(sum(sizes))
            x = block_cholesky_solve(diag, lower, rhs)
            x_dense = np.linalg.solve(full, rhs)
            scale = np.abs(x_dense).max()
            assert np.abs(x - x_dense).max() <= 1e-10 * (1.0 + scale)

    def test_singular_block_names_the_stage(self):
        diag = [np.eye(2), np.zeros((2, 2)), np.eye(2)]
        lower = [np.zeros((2, 2)), np.zeros((2, 2))]
        with pytest.raises(np.linalg.LinAlgError, match="block 1"):
            block_cholesky_solve(diag, lower, np.ones(6))

    def test_scaling_is_linear_in_block_count(self):
        # Doubling the number of blocks should roughly double the time; a
        # dense factorization would scale cubically (8x).  Generous bound.
        rng = np.random.default_rng(3)
        times = []
        for n_blocks in (60, 120):
            diag, lower, _ = random_block_tridiagonal(rng, (8,) * n_blocks,
                                                      shift=1.0)
            rhs = rng.standard_normal(8 * n_blocks)
            t0 = time.perf_counter()
            for _ in range(5):
                block_cholesky_solve(diag, lower, rhs)
            times.append(time.perf_counter() - t0)
        assert times[1] <= 5.0 * times[0]


class TestSigmaGammaDiag:
    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(11)
        n_x, n_u = 4, 2
        grad_x, grad_u, gains, covs, closed = [], [], [], [], []
        for n_g in (2, 0, 3, 1):
            gx = rng.standard_normal((n_g, n_x))
            gu = rng.standard_normal((n_g, n_u))
            k_mat = rng.standard_normal((n_u, n_x))
            a = rng.standard_normal((n_x, n_x + 2))
            cov = a @ a.T
            grad_x.append(gx)
            grad_u.append(gu)
            gains.append(k_mat)
            covs.append(cov)
            if n_g:
                closed.append(gx + gu @ k_mat)
        sigma = sigma_gamma_diag(grad_x, grad_u, gains, covs)
        # Dense oracle: the full stacked covariance of the constraint vector.
        delta_full = block_diag(*closed)
        cov_full = block_diag(*[c for c, g in zip(covs, grad_x) if g.shape[0]])
        dense = np.sqrt(np.diag(delta_full @ cov_full @ delta_full.T))
        assert sigma.shape == dense.shape
        assert np.abs(sigma - dense).max() <= 1e-12 * (1.0 + dense.max())


def perturbed_di_trajectory(scale=1e-3):
    """A converged constrained trajectory with continuity and cap violations."""
    model, x0, xt = constrained_di_model()
    res = ddp.aul_solve(model, x0, xt, opts=SolverOptions(stochastic=False))
    assert res.converged
    rng = np.random.default_rng(5)
    records = []
    for k, rec in enumerate(res.trajectory.records):
        mean = rec.belief.mean + (scale * rng.standard_normal(model.n_x)
                                  if k > 0 else 0.0)
        u = rec.u * 1.06 if np.linalg.norm(rec.u) > 0.1 else rec.u
        records.append(StageRecord(GaussianBelief(mean, rec.belief.cov), u,
                                   rec.K, rec.f_poly, rec.radius))
    terminal = GaussianBelief(
        res.trajectory.terminal.mean + scale * rng.standard_normal(model.n_x),
        res.trajectory.terminal.cov)
    return model, x0, xt, TrajectoryIterate(model, records, terminal)


class TestAssemble:
    def test_jacobian_matches_finite_differences(self):
        model, x0, xt, traj = perturbed_di_trajectory()
        opts = NewtonOptions(beta=0.05, eps_active=1e-3)
        stack = build_stack(traj, x0, xt, opts)
        assert stack.n_stochastic >= 1
        y = stack.pack(traj.states, traj.controls)
        states, controls = stack.unpack(y)
        lin = assemble(stack, states, controls, tau=0.0)
        # Dense jacobian from the block pairs.
        n_b = stack.block_size
        n_y = stack.n_stages * n_b
        rows = []
        for k, (a_k, b_k) in enumerate(lin.groups):
            block = np.zeros((b_k.shape[0], n_y))
            block[:, k * n_b:(k + 1) * n_b] = b_k
            if a_k is not None:
                block[:, (k - 1) * n_b:k * n_b] = a_k
            rows.append(block)
        delta = np.vstack(rows)
        # Finite differences of the raw residual (tau = 0 keeps rows smooth as
        # long as they stay strictly violated).
        eps = 1e-7
        for j in range(0, n_y, 7):
            yp, ym = y.copy(), y.copy()
            yp[j] += eps
            ym[j] -= eps
            rp = assemble(stack, *stack.unpack(yp), tau=0.0).residual
            rm = assemble(stack, *stack.unpack(ym), tau=0.0).residual
            fd = (rp - rm) / (2.0 * eps)
            active_rows = (np.abs(lin.residual) > 1e-5) | (
                np.abs(delta[:, j]) < 1e-12)
            err = np.abs(fd - delta[:, j])[active_rows]
            assert err.max(initial=0.0) <= 1e-5 * (1.0 + np.abs(delta).max())

    def test_step_matches_dense_least_norm(self):
        model, x0, xt, traj = perturbed_di_trajectory()
        opts = NewtonOptions(beta=0.05, eps_active=1e-3)
        stack = build_stack(traj, x0, xt, opts)
        states, controls = stack.unpack(stack.pack(traj.states, traj.controls))
        lin = assemble(stack, states, controls, tau=0.0)
        dy = newton_step(lin, stack.block_size)
        n_b = stack.block_size
        n_y = stack.n_stages * n_b
        rows = []
        for k, (a_k, b_k) in enumerate(lin.groups):
            block = np.zeros((b_k.shape[0], n_y))
            block[:, k * n_b:(k + 1) * n_b] = b_k
            if a_k is not None:
                block[:, (k - 1) * n_b:k * n_b] = a_k
            rows.append(block)
        delta = np.vstack(rows)
        dy_dense = -delta.T @ np.linalg.solve(delta @ delta.T, lin.residual)
        scale = 1.0 + np.abs(dy_dense).max()
        assert np.abs(dy - dy_dense).max() <= 1e-10 * scale

    def test_pack_unpack_roundtrip(self):
        model, x0, xt, traj = perturbed_di_trajectory()
        stack = build_stack(traj, x0, xt, NewtonOptions())
        y = stack.pack(traj.states, traj.controls)
        states, controls = stack.unpack(y)
        assert np.array_equal(states[1:], traj.states[1:])
        assert np.array_equal(states[0], x0.mean)
        assert np.array_equal(controls, traj.controls)


class TestAdaptiveNewton:
    def test_restores_feasibility_to_tolerance(self):
        model, x0, xt, traj = perturbed_di_trajectory()
        opts = NewtonOptions(beta=0.05, eps_active=1e-3)
        out = adaptive_newton(traj, x0, xt, opts)
        assert out.converged
        assert out.d_max <= 1e-10
        # Continuity restored on the polished trajectory.
        defect = max(
            np.abs(out.states[k + 1] - np.array(
                model.step(list(out.states[k]), list(out.controls[k])))).max()
            for k in range(model.n_stages))
        assert defect <= 1e-9
        # The violated cap is pulled back to (or inside) its boundary.
        cap = max(model.path_constraints(list(x), list(u))[0]
                  for x, u in zip(out.states[:-1], out.controls))
        assert cap <= 1e-10
        assert 0.0 <= out.tau <= 1.0
        assert 0.0 <= out.beta_estimate <= 1.0
        assert any(e["phase"] == "newton" for e in out.log)
        assert any(e["phase"] == "relaxation" for e in out.log)

    def test_feasible_input_is_a_fixed_point(self):
        model, x0, xt = constrained_di_model()
        res = ddp.aul_solve(model, x0, xt, opts=SolverOptions(stochastic=False))
        out = adaptive_newton(res.trajectory, x0, xt, NewtonOptions(beta=0.05))
        assert out.converged
        assert np.abs(out.states - res.trajectory.states).max() <= 1e-12
        assert np.abs(out.controls - res.trajectory.controls).max() <= 1e-12

    def test_unconstrained_model_returns_immediately(self):
        model, x0, xt = build_problem("double_integrator")
        res = ddp.aul_solve(model, x0, xt, opts=SolverOptions(stochastic=False))
        out = adaptive_newton(res.trajectory, x0, xt, NewtonOptions(beta=0.05))
        assert out.converged
        assert out.beta_estimate == 0.0
        assert out.n_iterations == 1
