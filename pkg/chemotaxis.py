"""
Chemotaxis

Semi-implicit finite volume solvers for the three regularised systems

    A  u_t = Lap u - div(u grad v) + g(u)
       v_t = Lap v - v + u/(1 + eps u)
    B  u_t = Lap u - chi div(u/((1 + eps u) v) grad v)
       v_t = Lap v - v + u
    C  u_t = Lap u - chi div(u/((1 + eps u) v) grad v) + g(u)
       v_t = Lap v - u v/((1 + eps u)(1 + eps v))

Each step updates v implicitly first, then u with implicit diffusion, explicit
upwind taxis built on v_{n+1} and explicit g(u_n). Positivity is asserted,
never enforced by clipping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from numpy.typing import NDArray

from grid_core import (
    FaceField,
    FieldTrajectory,
    Grid,
    ScalarField,
    divergence,
    face_average,
    face_gradient,
    face_integral,
    face_pairs,
    integrate,
)
from functionals import gradient_energy
from heat_solver import SolverConfig, solve_shifted, steps_for

POSITIVITY_TOL = 1e-12

Variant = Literal["A", "B", "C"]


class ChemoError(RuntimeError):
    pass


class CFLError(ChemoError):
    def __init__(self, message: str, dt: float, limit: float):
        super().__init__(f"{message}: dt={dt:.6g} exceeds {limit:.6g}; reduce dt")
        self.dt = dt
        self.limit = limit


class PositivityError(ChemoError):
    def __init__(self, component: str, step: int, cell: tuple[int, ...], value: float):
        super().__init__(f"{component} lost positivity at step {step}, cell {cell}: {value:.6e}")
        self.component = component
        self.step = step
        self.cell = cell
        self.value = value


@dataclass(frozen=True)
class DampeningSpec:
    """g(s) = lam s - mu s^beta."""

    lam: float
    mu: float
    beta: float

    def __post_init__(self):
        if not self.mu > 0.0:
            raise ValueError(f"mu must be positive, got {self.mu}")
        if not self.beta > 1.0:
            raise ValueError(f"beta must exceed 1, got {self.beta}")

    def g(self, s: NDArray | float) -> NDArray:
        s = np.maximum(np.asarray(s, dtype=np.float64), 0.0)
        return self.lam * s - self.mu * s**self.beta

    def g_prime(self, s: NDArray | float) -> NDArray:
        s = np.maximum(np.asarray(s, dtype=np.float64), 0.0)
        return self.lam - self.mu * self.beta * s ** (self.beta - 1.0)

    @property
    def positive_root(self) -> float:
        """sup{s >= 0 : g(s) >= 0}."""
        if self.lam <= 0.0:
            return 0.0
        return (self.lam / self.mu) ** (1.0 / (self.beta - 1.0))

    @property
    def g_max(self) -> float:
        """2 max_{[0, s0]} |g|."""
        if self.lam <= 0.0:
            return 0.0
        peak = (self.lam / (self.mu * self.beta)) ** (1.0 / (self.beta - 1.0))
        return 2.0 * float(self.g(peak))

    def max_abs_slope(self, upper: float) -> float:
        """max |g'| on [0, upper]; g' decreases monotonically."""
        return max(abs(self.lam), abs(float(self.g_prime(max(upper, 0.0)))))


@dataclass(frozen=True)
class ChemoSystem:
    variant: Variant
    chi: float = 1.0
    eps: float = 0.1
    g: DampeningSpec | None = None

    def __post_init__(self):
        if self.variant not in ("A", "B", "C"):
            raise ValueError(f"unknown system variant '{self.variant}'")
        if not 0.0 < self.eps < 1.0:
            raise ValueError(f"eps must lie in (0, 1), got {self.eps}")
        if not self.chi > 0.0:
            raise ValueError(f"chi must be positive, got {self.chi}")
        if self.variant == "B" and self.g is not None:
            raise ValueError("system B carries no dampening term")
        if self.variant in ("A", "C") and self.g is None:
            raise ValueError(f"system {self.variant} requires a dampening term g")

    @property
    def logarithmic(self) -> bool:
        return self.variant in ("B", "C")

    def mobility_factor(self, u: NDArray, v: NDArray) -> NDArray:
        """Taxis velocity per unit grad v: 1 for A, chi/((1 + eps u) v) for B and C."""
        if self.variant == "A":
            return np.ones_like(u)
        return self.chi / ((1.0 + self.eps * u) * v)

    def v_coefficients(self, u: NDArray, v: NDArray) -> tuple[NDArray | float, NDArray | float]:
        """(r, s) of the v-update (I/dt - Lap + r) v_{n+1} = v_n/dt + s, frozen at step n."""
        if self.variant == "A":
            return 1.0, u / (1.0 + self.eps * u)
        if self.variant == "B":
            return 1.0, u
        return u / ((1.0 + self.eps * u) * (1.0 + self.eps * v)), 0.0


@dataclass
class FrameDiagnostics:
    t: float
    mass_u: float
    min_u: float
    max_u: float
    min_v: float
    max_v: float
    quasi_energy: float | None
    grad_ln_u: float
    grad_ln_v: float | None
    abs_g: float | None


@dataclass
class ChemoRun:
    system: ChemoSystem
    u_traj: FieldTrajectory
    v_traj: FieldTrajectory
    diagnostics: list[FrameDiagnostics] = field(default_factory=list)

    @property
    def grid(self) -> Grid:
        return self.u_traj.grid

    @property
    def dt(self) -> float:
        return self.u_traj.dt

    @property
    def steps(self) -> int:
        return self.u_traj.steps

    @property
    def t_end(self) -> float:
        return self.u_traj.t_end

    def series(self, name: str) -> NDArray:
        return np.array([getattr(d, name) for d in self.diagnostics], dtype=np.float64)


# ---------------------------------------------------------------------------
# Fluxes and guards
# ---------------------------------------------------------------------------


def _check_v_positive(v: ScalarField, step: int = -1):
    if v.min() <= 0.0:
        cell = tuple(int(i) for i in np.unravel_index(np.argmin(v.values), v.grid.shape))
        raise ChemoError(f"v must stay positive for the logarithmic sensitivity; v={v.min():.6e} in cell {cell}" + (f" at step {step}" if step >= 0 else ""))


def _upwind(cell_values: NDArray, grad_v: FaceField) -> FaceField:
    pairs = face_pairs(ScalarField(grad_v.grid, cell_values))
    return FaceField(
        grad_v.grid, tuple(np.where(g > 0.0, lo, hi) for (lo, hi), g in zip(pairs, grad_v.components))
    )


def taxis_velocity(u: ScalarField, v: ScalarField, system: ChemoSystem) -> FaceField:
    """Face velocity flux/donor-u with the donor picked by the sign of grad v."""
    if system.logarithmic:
        _check_v_positive(v)
    grad_v = face_gradient(v)
    return _upwind(system.mobility_factor(u.values, v.values), grad_v) * grad_v


def taxis_face_flux(u: ScalarField, v: ScalarField, system: ChemoSystem) -> FaceField:
    """Upwind face flux mobility(donor) * grad v.

    The donor is the left (lower) cell where grad v > 0, the right cell otherwise.
    """
    if system.logarithmic:
        _check_v_positive(v)
    grad_v = face_gradient(v)
    mobility = u.values * system.mobility_factor(u.values, v.values)
    return _upwind(mobility, grad_v) * grad_v


def _advective_rate(velocity: FaceField) -> float:
    grid = velocity.grid
    return sum(
        2.0 * float(np.max(np.abs(c), initial=0.0)) / grid.spacing[a] for a, c in enumerate(velocity.components)
    )


def stable_dt(u: ScalarField, v: ScalarField, system: ChemoSystem) -> float:
    """Largest dt admitted by the advective CFL and the dampening guard for this state."""
    rate = _advective_rate(taxis_velocity(u, v, system))
    limit = 1.0 / rate if rate > 0.0 else math.inf
    if system.g is not None:
        slope = system.g.max_abs_slope(u.max())
        if slope > 0.0:
            limit = min(limit, 0.5 / slope)
    return limit


def _assert_nonnegative(field: ScalarField, component: str, step: int):
    if field.min() < -POSITIVITY_TOL:
        cell = tuple(int(i) for i in np.unravel_index(np.argmin(field.values), field.grid.shape))
        raise PositivityError(component, step, cell, field.min())


# ---------------------------------------------------------------------------
# Stepping
# ---------------------------------------------------------------------------


def step_chemo(
    u: ScalarField, v: ScalarField, system: ChemoSystem, config: SolverConfig, step: int = 0
) -> tuple[ScalarField, ScalarField]:
    grid = u.grid
    dt = config.dt
    r, s = system.v_coefficients(u.values, v.values)
    v_next = ScalarField(grid, solve_shifted(grid, 1.0 / dt + np.asarray(r), v.values / dt + s, config, guess=v.values))
    if system.logarithmic:
        _check_v_positive(v_next, step)
    else:
        _assert_nonnegative(v_next, "v", step)

    rate = _advective_rate(taxis_velocity(u, v_next, system))
    if dt * rate > 1.0 + 1e-12:
        raise CFLError(f"advective CFL violated at step {step}", dt, 1.0 / rate)
    growth = 0.0
    if system.g is not None:
        slope = system.g.max_abs_slope(u.max())
        if dt * slope > 0.5 + 1e-12:
            raise CFLError(f"dampening step guard dt*max|g'| <= 1/2 violated at step {step}", dt, 0.5 / slope)
        growth = system.g.g(u.values)

    flux = taxis_face_flux(u, v_next, system)
    rhs = u.values / dt - divergence(flux).values + growth
    u_next = ScalarField(grid, solve_shifted(grid, 1.0 / dt, rhs, config, guess=u.values))
    _assert_nonnegative(u_next, "u", step)
    return u_next, v_next


def solve_chemo(
    system: ChemoSystem, u0: ScalarField, v0: ScalarField, t_end: float, config: SolverConfig
) -> ChemoRun:
    if u0.grid != v0.grid:
        raise ValueError("u0 and v0 must share one grid")
    if not t_end > 0.0:
        raise ValueError(f"horizon must be positive, got {t_end}")
    if u0.min() < 0.0:
        raise ValueError(f"u0 must be nonnegative, min is {u0.min():.6g}")
    if system.logarithmic and v0.min() <= 0.0:
        raise ValueError(f"system {system.variant} needs v0 > 0, min is {v0.min():.6g}")
    if not system.logarithmic and v0.min() < 0.0:
        raise ValueError(f"v0 must be nonnegative, min is {v0.min():.6g}")

    us, vs = [u0], [v0]
    diagnostics = [frame_diagnostics(u0, v0, system, 0.0)]
    for n in range(steps_for(t_end, config.dt)):
        u_next, v_next = step_chemo(us[-1], vs[-1], system, config, step=n)
        us.append(u_next)
        vs.append(v_next)
        diagnostics.append(frame_diagnostics(u_next, v_next, system, (n + 1) * config.dt))
    grid = u0.grid
    return ChemoRun(
        system,
        FieldTrajectory(grid, config.dt, tuple(us)),
        FieldTrajectory(grid, config.dt, tuple(vs)),
        diagnostics,
    )


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------


def log_gradient_u(u: ScalarField) -> float:
    """int |grad u|^2/(u + 1)^2 on one frame."""
    weight = face_average(u).map(lambda a: (a + 1.0) ** -2)
    return face_integral(face_gradient(u).squared() * weight)


def log_gradient_v(v: ScalarField) -> float:
    """int |grad v|^2/v^2 on one frame."""
    weight = face_average(v).map(lambda a: a**-2)
    return face_integral(face_gradient(v).squared() * weight)


def frame_diagnostics(u: ScalarField, v: ScalarField, system: ChemoSystem, t: float) -> FrameDiagnostics:
    return FrameDiagnostics(
        t=t,
        mass_u=integrate(u),
        min_u=u.min(),
        max_u=u.max(),
        min_v=v.min(),
        max_v=v.max(),
        quasi_energy=quasi_energy(u, v, system.chi) if system.variant == "C" else None,
        grad_ln_u=log_gradient_u(u),
        grad_ln_v=log_gradient_v(v) if system.logarithmic else None,
        abs_g=integrate(np.abs(system.g.g(u.values)), u.grid) if system.g is not None else None,
    )


def quasi_energy(u: ScalarField, v: ScalarField, chi: float) -> float:
    """-(int ln(u + 1) + chi^2 int ln v)."""
    if v.min() <= 0.0:
        raise ValueError(f"quasi-energy needs v > 0, min is {v.min():.6g}")
    return -(integrate(np.log1p(u.values), u.grid) + chi * chi * integrate(np.log(v.values), v.grid))


def functional_upvq(u: ScalarField, v: ScalarField, p: float, q: float) -> float:
    """int u^p v^q."""
    for name, value in (("p", p), ("q", q)):
        if not 0.0 < value <= 1.0:
            raise ValueError(f"{name} must lie in (0, 1], got {value}")
    return integrate(np.maximum(u.values, 0.0) ** p * v.values**q, u.grid)


def lemma55_functional(run: ChemoRun, p: float, kappa: float) -> float:
    """int int |grad((u + 1)^{-p} e^{-kappa v})|^2."""
    frames = tuple(
        ScalarField(run.grid, (np.maximum(u.values, 0.0) + 1.0) ** -p * np.exp(-kappa * v.values))
        for u, v in zip(run.u_traj.frames, run.v_traj.frames)
    )
    return gradient_energy(FieldTrajectory(run.grid, run.dt, frames))


def lemma64_functionals(run: ChemoRun, r: float) -> tuple[float, float]:
    """(int int |grad u|^2/(u + 1)^2, int int u^r)."""
    if not r > 0.0:
        raise ValueError(f"r must be positive, got {r}")
    dt = run.dt
    log_grad = dt * sum(log_gradient_u(u) for u in run.u_traj.frames[1:])
    power = dt * sum(integrate(np.maximum(u.values, 0.0) ** r, run.grid) for u in run.u_traj.frames[:-1])
    return log_grad, power
