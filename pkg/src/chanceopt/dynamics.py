"""Discrete-stage dynamics models, unit systems, and test problems.

All stage maps are written generically over the scalar type: the same code
propagates plain floats, batched NumPy arrays (vectorized Monte Carlo), and
TruncatedPolynomial values (Taylor expansion of the stage map for the
solver).  States and controls are passed as sequences of scalars.

Normalized units are used internally: positions in LU, velocities in VU,
time in TU, mass in kg, thrust in N.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import dapoly as dp
from .dapoly import PolyVector, TruncatedPolynomial
from .gauss import GaussianBelief

DAY = 86400.0


class SingularityError(ArithmeticError):
    """Trajectory passed too close to a primary body."""


@dataclass(frozen=True)
class UnitSystem:
    """Normalization units and spacecraft parameters."""

    mu_grav: float          # gravitational parameter [km^3/s^2] of the normalization
    LU: float               # length unit [km]
    TU: float               # time unit [s]
    VU: float = None        # velocity unit [km/s]; derived as LU/TU when omitted
    g0: float = 9.81        # standard gravity [m/s^2]
    isp: float = 2000.0     # specific impulse [s]
    m_dry: float = 500.0    # dry mass [kg]
    u_max: float = 0.5      # max thrust [N]
    mass_ratio: float | None = None  # CR3BP secondary/total mass ratio

    def __post_init__(self):
        if self.VU is None:
            object.__setattr__(self, "VU", self.LU / self.TU)
        elif abs(self.VU - self.LU / self.TU) > 1e-9 * self.VU:
            raise ValueError("inconsistent units: VU must equal LU/TU")

    @property
    def thrust_accel_scale(self) -> float:
        """Normalized acceleration per (N / kg): (u/m)*1e-3 km/s^2 in LU/TU^2."""
        return 1e-3 * self.TU**2 / self.LU

    @property
    def mass_flow_scale(self) -> float:
        """kg consumed per (N * TU) at this Isp: ||u||/(g0*Isp) in kg/s times TU."""
        return self.TU / (self.g0 * self.isp)


SUN_UNITS = UnitSystem(
    mu_grav=1.32712440041e11,
    LU=149597870.7,
    TU=5022642.891,
    VU=29.78469183,
)

EARTH_MOON_UNITS = UnitSystem(
    mu_grav=398600.0 + 4902.80,
    LU=384399.0,
    TU=375189.0,
    mass_ratio=1.21506e-2,
)


# -- scalar-generic helpers ----------------------------------------------------


def _sqrt(x):
    return dp.sqrt(x) if isinstance(x, TruncatedPolynomial) else np.sqrt(x)


def _inv_cube(x_sq):
    """(x_sq)^(-3/2) for a squared distance."""
    if isinstance(x_sq, TruncatedPolynomial):
        return dp.power(x_sq, -1.5)
    return x_sq**-1.5


def _recip(x):
    return dp.recip(x) if isinstance(x, TruncatedPolynomial) else 1.0 / x


def _const_part(x):
    return x.const if isinstance(x, TruncatedPolynomial) else float(np.min(x))


def norm_of(vec):
    """Euclidean norm of a sequence of generic scalars."""
    s = vec[0] * vec[0]
    for c in vec[1:]:
        s = s + c * c
    return _sqrt(s)


# Smoothing width [N] for the control-norm terms in thrust dynamics and fuel
# costs.  Fuel-optimal solutions coast (u = 0), where the exact norm is not
# differentiable; the rounded norm is smooth everywhere and differs from the
# exact one by at most U_NORM_EPS, i.e. milligrams of propellant per stage.
U_NORM_EPS = 1e-4


def smooth_sqrt(s, eps=U_NORM_EPS):
    """Rounded square root sqrt(s + eps^2) of a generic nonnegative scalar."""
    return _sqrt(s + eps * eps)


def smooth_norm(vec, eps=U_NORM_EPS):
    """Rounded Euclidean norm sqrt(|v|^2 + eps^2) of generic scalars."""
    s = eps * eps + vec[0] * vec[0]
    for c in vec[1:]:
        s = s + c * c
    return _sqrt(s)


def rk4(rhs, state, dt, substeps):
    """Fixed-step RK4 over one stage; generic over the scalar type."""
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    h = dt / substeps
    x = list(state)
    for _ in range(substeps):
        k1 = rhs(x)
        k2 = rhs([xi + 0.5 * h * ki for xi, ki in zip(x, k1)])
        k3 = rhs([xi + 0.5 * h * ki for xi, ki in zip(x, k2)])
        k4 = rhs([xi + h * ki for xi, ki in zip(x, k3)])
        x = [
            xi + (h / 6.0) * (a + 2.0 * b + 2.0 * c + d)
            for xi, a, b, c, d in zip(x, k1, k2, k3, k4)
        ]
    return x


# -- stage maps ----------------------------------------------------------------


def step_double_integrator(x, u, variant: str = "literal"):
    """One stage of the double integrator.

    The "literal" variant swaps the position block for the velocity and the
    velocity block for the control in a single stage.  The "accumulate"
    variant is the conventional discrete form r' = r + v, v' = u.
    """
    r, v = x[:3], x[3:6]
    if variant == "literal":
        return list(v) + list(u)
    if variant == "accumulate":
        return [ri + vi for ri, vi in zip(r, v)] + list(u)
    raise ValueError(f"unknown double-integrator variant {variant!r}")


def _two_body_rhs(units: UnitSystem, u):
    ts = units.thrust_accel_scale
    mf = units.mass_flow_scale
    u_norm = smooth_norm(u)

    def rhs(x):
        r, v, m = x[:3], x[3:6], x[6]
        r_sq = r[0] * r[0] + r[1] * r[1] + r[2] * r[2]
        if _const_part(r_sq) <= 1e-12:
            raise SingularityError("two-body: radius collapsed to the primary")
        inv_r3 = _inv_cube(r_sq)
        inv_m = _recip(m)
        acc = [-ri * inv_r3 + (ts * ui) * inv_m for ri, ui in zip(r, u)]
        return list(v) + acc + [-mf * u_norm]

    return rhs


def step_two_body(x, u, dt, substeps=10, units: UnitSystem = SUN_UNITS):
    """Heliocentric low-thrust stage: state [r(3), v(3), m], control u [N]."""
    return rk4(_two_body_rhs(units, u), x, dt, substeps)


def _cr3bp_rhs(units: UnitSystem, u):
    mu = units.mass_ratio
    if mu is None:
        raise ValueError("CR3BP needs a unit system with a mass ratio")
    ts = units.thrust_accel_scale
    mf = units.mass_flow_scale
    u_norm = smooth_norm(u)

    def rhs(state):
        x, y, z, vx, vy, vz, m = state
        d1_sq = (x + mu) * (x + mu) + y * y + z * z
        d2_sq = (x + mu - 1.0) * (x + mu - 1.0) + y * y + z * z
        if _const_part(d1_sq) < 1e-12 or _const_part(d2_sq) < 1e-12:
            raise SingularityError("CR3BP: trajectory reached a primary")
        inv_d1_3 = _inv_cube(d1_sq)
        inv_d2_3 = _inv_cube(d2_sq)
        inv_m = _recip(m)
        # Effective-potential gradient in the rotating frame.
        gx = x - (1.0 - mu) * (x + mu) * inv_d1_3 - mu * (x + mu - 1.0) * inv_d2_3
        gy = y - (1.0 - mu) * y * inv_d1_3 - mu * y * inv_d2_3
        gz = -(1.0 - mu) * z * inv_d1_3 - mu * z * inv_d2_3
        ax = 2.0 * vy + gx + (ts * u[0]) * inv_m
        ay = -2.0 * vx + gy + (ts * u[1]) * inv_m
        az = gz + (ts * u[2]) * inv_m
        return [vx, vy, vz, ax, ay, az, -mf * u_norm]

    return rhs


def step_cr3bp(x, u, dt, substeps=10, units: UnitSystem = EARTH_MOON_UNITS):
    """Earth-Moon rotating-frame stage: state [r(3), v(3), m], control u [N]."""
    return rk4(_cr3bp_rhs(units, u), x, dt, substeps)


def jacobi_constant(state, units: UnitSystem = EARTH_MOON_UNITS) -> float:
    mu = units.mass_ratio
    x, y, z, vx, vy, vz = state[:6]
    d1 = math.sqrt((x + mu) ** 2 + y**2 + z**2)
    d2 = math.sqrt((x + mu - 1.0) ** 2 + y**2 + z**2)
    omega = 0.5 * (x**2 + y**2) + (1.0 - mu) / d1 + mu / d2
    return 2.0 * omega - (vx**2 + vy**2 + vz**2)


# -- DA expansion of a stage map -------------------------------------------------


def expand_map(fn, x_center, u_center, order: int = 3) -> PolyVector:
    """Taylor-expand ``fn(x, u)`` about a nominal point.

    Returns the expansion in joint deviation variables (dx..., du...) with
    n_vars = len(x_center) + len(u_center).  ``fn`` must be scalar-generic.
    """
    x_center = np.asarray(x_center, dtype=float)
    u_center = np.asarray(u_center, dtype=float)
    n = x_center.size + u_center.size
    xs = [
        TruncatedPolynomial.variable(i, n, order, center=float(c))
        for i, c in enumerate(x_center)
    ]
    us = [
        TruncatedPolynomial.variable(x_center.size + i, n, order, center=float(c))
        for i, c in enumerate(u_center)
    ]
    out = fn(xs, us)
    comps = [
        c if isinstance(c, TruncatedPolynomial) else TruncatedPolynomial.constant(float(c), n, order)
        for c in out
    ]
    return PolyVector(comps)


def expand_scalar(fn, x_center, u_center, order: int = 3) -> TruncatedPolynomial:
    """Like :func:`expand_map` for a scalar-valued function."""
    return expand_map(lambda xs, us: [fn(xs, us)], x_center, u_center, order)[0]


# -- problem definitions ---------------------------------------------------------


@dataclass
class StageModel:
    """A discretized optimal-control problem over one dynamics model."""

    name: str
    n_x: int
    n_u: int
    n_stages: int
    dt: float                     # normalized per-stage flight time
    units: UnitSystem
    step: "callable"              # step(x, u) -> x', scalar-generic
    stage_cost: "callable"        # l(x, u) -> scalar
    terminal_cost: "callable"     # phi(x, xt_mean) -> scalar
    path_constraints: "callable"  # g(x, u) -> list of scalars (<= 0 feasible)
    n_path_constraints: int
    process_noise: np.ndarray     # Q_x per stage
    # Indices entering the terminal confidence-region constraint (states with
    # zero target variance, e.g. mass, are excluded).
    terminal_dims: np.ndarray = field(default=None)

    def propagate_nominal(self, x0: np.ndarray, controls: np.ndarray) -> np.ndarray:
        """Roll out the mean trajectory; returns array (n_stages+1, n_x)."""
        xs = [np.asarray(x0, dtype=float)]
        for k in range(self.n_stages):
            xs.append(np.array(self.step(list(xs[-1]), list(controls[k])), dtype=float))
        return np.stack(xs)


def _no_constraints(x, u):
    return []


def _fuel_problem_functions(units: UnitSystem):
    def stage_cost(x, u):
        return smooth_norm(u) * 0.5

    def terminal_cost(x, xt):
        err = [(xi - ti) for xi, ti in zip(x[:6], xt[:6])]
        out = err[0] * err[0]
        for e in err[1:]:
            out = out + e * e
        return out

    def path_constraints(x, u):
        u_sq = u[0] * u[0] + u[1] * u[1] + u[2] * u[2]
        return [u_sq - units.u_max**2, units.m_dry - x[6]]

    return stage_cost, terminal_cost, path_constraints


_CR3BP_CASES = {
    # name: (ToF days, N, x0 mean(6), x0 std(6), xt mean(6))
    "halo_l2_l1": (
        20.0, 110,
        [1.16080, 0.0, -0.12270, 0.0, -0.20768, 0.0],
        [1e-6, 1e-6, 1e-6, 1e-5, 1e-5, 1e-5],
        [0.84871, 0.0, 0.17389, 0.0, 0.26350, 0.0],
    ),
    "nrho_dro": (
        21.2, 150,
        [1.02197, 0.0, -0.18206, 0.0, -0.10314, 0.0],
        [2e-6, 2e-6, 2e-6, 1e-5, 1e-5, 1e-5],
        [0.98337, 0.25921, 0.0, 0.35134, -0.00833, 0.0],
    ),
    "lyap_l1_l2": (
        12.0, 300,
        [0.85599, 0.12437, 0.0, 0.09485, 0.04411, 0.0],
        [5e-6, 5e-6, 5e-6, 5e-5, 5e-5, 5e-5],
        [1.09598, 0.11526, 0.0, 0.03747, 0.12674, 0.0],
    ),
    "dro_dro": (
        17.5, 100,
        [1.17136, 0.0, 0.0, 0.0, -0.48946, 0.0],
        [1e-6, 1e-6, 1e-6, 5e-5, 5e-5, 5e-5],
        [1.30184, 0.0, 0.0, 0.0, -0.64218, 0.0],
    ),
}

PROBLEM_NAMES = ("double_integrator", "earth_mars", *_CR3BP_CASES)


def build_problem(name: str, overrides: dict | None = None):
    """Construct a named test problem.

    Returns (StageModel, x0 belief, target belief).  ``overrides`` may set
    n_stages, tof_days, substeps, sigma0_diag, sigmat_diag, q_scale (process
    noise = Sigma0 / q_scale, default 1e4), and di_variant for the double
    integrator.
    """
    ov = dict(overrides or {})

    if name == "double_integrator":
        n_x, n_u = 6, 3
        n_stages = int(ov.pop("n_stages", 11))
        variant = ov.pop("di_variant", "literal")
        sigma0 = np.diag(ov.pop("sigma0_diag", np.full(n_x, 1e-4)))
        sigmat = np.diag(ov.pop("sigmat_diag", np.full(n_x, 1e-4)))
        q_scale = float(ov.pop("q_scale", 1e4))
        _reject_unknown(ov, name)
        x0 = GaussianBelief(np.ones(n_x), sigma0)
        xt = GaussianBelief(np.array([1.0, -1.0, 0.0, 0.0, 0.0, 0.0]), sigmat)

        def stage_cost(x, u):
            return u[0] * u[0] + u[1] * u[1] + u[2] * u[2]

        def terminal_cost(x, xt_mean):
            err = [(x[i] - xt_mean[i]) for i in range(3)]
            return err[0] * err[0] + err[1] * err[1] + err[2] * err[2]

        model = StageModel(
            name=name, n_x=n_x, n_u=n_u, n_stages=n_stages, dt=1.0,
            units=SUN_UNITS,
            step=lambda x, u: step_double_integrator(x, u, variant=variant),
            stage_cost=stage_cost, terminal_cost=terminal_cost,
            path_constraints=_no_constraints, n_path_constraints=0,
            process_noise=sigma0 / q_scale,
            # The benchmark is a pure linear-quadratic problem: the target set
            # enters only through the terminal penalty, never as a constraint.
            terminal_dims=None,
        )
        return model, x0, xt

    if name == "earth_mars":
        units = SUN_UNITS
        n_x, n_u = 7, 3
        n_stages = int(ov.pop("n_stages", 40))
        tof_days = float(ov.pop("tof_days", 348.79))
        substeps = int(ov.pop("substeps", 10))
        mean0 = np.array(
            [-140699693.0, -51614428.0, 980.0]
        ) / units.LU
        vel0 = np.array([9.774596, -28.07828, 4.337725e-4]) / units.VU
        meant = np.array([-172682023.0, 176959469.0, 7948912.0]) / units.LU
        velt = np.array([-16.427384, -14.860506, 9.21486e-2]) / units.VU
        x0_mean = np.concatenate([mean0, vel0, [1000.0]])
        xt_mean = np.concatenate([meant, velt, [0.0]])  # mass untargeted
        std0 = np.asarray(
            ov.pop("sigma0_diag", [1e-6] * 3 + [5e-7] * 3 + [0.0])
        )
        stdt = np.asarray(
            ov.pop("sigmat_diag", [1e-4] * 3 + [1e-5] * 3 + [0.0])
        )
        q_scale = float(ov.pop("q_scale", 1e4))
        _reject_unknown(ov, name)
        dt = tof_days * DAY / units.TU / n_stages
        x0 = GaussianBelief(x0_mean, np.diag(std0**2))
        xt = GaussianBelief(xt_mean, np.diag(stdt**2))
        l, phi, g = _fuel_problem_functions(units)
        model = StageModel(
            name=name, n_x=n_x, n_u=n_u, n_stages=n_stages, dt=dt, units=units,
            step=lambda x, u: step_two_body(x, u, dt, substeps, units),
            stage_cost=l, terminal_cost=phi,
            path_constraints=g, n_path_constraints=2,
            process_noise=np.diag(std0**2) / q_scale,
            terminal_dims=np.arange(6),
        )
        return model, x0, xt

    if name in _CR3BP_CASES:
        units = EARTH_MOON_UNITS
        tof_days, n_default, m0, s0, mt = _CR3BP_CASES[name]
        n_x, n_u = 7, 3
        n_stages = int(ov.pop("n_stages", n_default))
        tof_days = float(ov.pop("tof_days", tof_days))
        substeps = int(ov.pop("substeps", 10))
        std0 = np.asarray(ov.pop("sigma0_diag", list(s0) + [0.0]))
        stdt = np.asarray(ov.pop("sigmat_diag", list(np.asarray(s0) / 10.0) + [0.0]))
        q_scale = float(ov.pop("q_scale", 1e4))
        _reject_unknown(ov, name)
        dt = tof_days * DAY / units.TU / n_stages
        x0 = GaussianBelief(np.array(list(m0) + [1000.0]), np.diag(std0**2))
        xt = GaussianBelief(np.array(list(mt) + [0.0]), np.diag(stdt**2))
        l, phi, g = _fuel_problem_functions(units)
        model = StageModel(
            name=name, n_x=n_x, n_u=n_u, n_stages=n_stages, dt=dt, units=units,
            step=lambda x, u: step_cr3bp(x, u, dt, substeps, units),
            stage_cost=l, terminal_cost=phi,
            path_constraints=g, n_path_constraints=2,
            process_noise=np.diag(std0**2) / q_scale,
            terminal_dims=np.arange(6),
        )
        return model, x0, xt

    raise ValueError(f"unknown problem {name!r}; choose from {PROBLEM_NAMES}")


def _reject_unknown(ov: dict, name: str) -> None:
    if ov:
        raise ValueError(f"unknown overrides for {name}: {sorted(ov)}")
