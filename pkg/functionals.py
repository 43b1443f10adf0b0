"""
Functionals on solutions: truncations, weighted gradient energies, the Landes
time regularisation, the de la Vallee Poussin weight and its Young constant.

Gradient-type space-time integrals use the right endpoint rule (frames 1..M),
the quadrature under which the implicit stepper's energy identities hold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.interpolate import CubicSpline

from grid_core import (
    FaceField,
    FieldTrajectory,
    Grid,
    ScalarField,
    face_average,
    face_gradient,
    face_integral,
    face_spacetime_integral,
    integrate,
    spacetime_integral,
)
from weak_forms import TestFunctionSet

C_LADDER = tuple(2.0**-j for j in range(21))
CONCENTRATION_OCTAVES = 6


class NotUniformlyIntegrableError(ValueError):
    def __init__(
        self,
        budget: float,
        best_value: float,
        tail_masses: list[tuple[float, float]],
        concentrating: bool = False,
    ):
        if concentrating:
            reason = f"family concentrates (sup int Phi_c(|z|) = {best_value:.6g} at c = 2^-20 grows along it)"
        else:
            reason = f"smallest sup int Phi_c(|z|) is {best_value:.6g} > budget {budget:.6g} (c = 2^-20)"
        super().__init__(f"not-uniformly-integrable at this budget: {reason}; tail masses {tail_masses}")
        self.concentrating = concentrating
        self.budget = budget
        self.best_value = best_value
        self.tail_masses = tail_masses


# ---------------------------------------------------------------------------
# Truncation
# ---------------------------------------------------------------------------


def truncate(field: ScalarField, k: float) -> ScalarField:
    if not k > 0.0:
        raise ValueError(f"truncation level must be positive, got {k}")
    return field.with_values(np.clip(field.values, -k, k))


def sk_values(values: NDArray, k: float) -> NDArray:
    a = np.abs(values)
    return np.where(a <= k, 0.5 * a * a, k * a - 0.5 * k * k)


def sk_integral(field: ScalarField, k: float) -> float:
    """int S_k(z) with S_k the primitive of T_k."""
    if not k > 0.0:
        raise ValueError(f"truncation level must be positive, got {k}")
    return integrate(sk_values(field.values, k), field.grid)


# ---------------------------------------------------------------------------
# Gradient energies
# ---------------------------------------------------------------------------


def _abs_face_average(field: ScalarField) -> FaceField:
    return face_average(field.with_values(np.abs(field.values)))


def gradient_energy(traj: FieldTrajectory, rule: str = "right") -> float:
    return face_spacetime_integral(traj, lambda f, t: face_gradient(f).squared(), rule)


def truncated_gradient_energy(traj: FieldTrajectory, k: float, rule: str = "right") -> float:
    """int int 1_{|z| <= k} |grad z|^2, the indicator realised by truncating before differencing."""
    if not k > 0.0:
        raise ValueError(f"truncation level must be positive, got {k}")
    return face_spacetime_integral(traj, lambda f, t: face_gradient(truncate(f, k)).squared(), rule)


def weighted_gradient_energy(traj: FieldTrajectory, alpha: float, rule: str = "right") -> float:
    """int int |grad z|^2 / (|z| + 1)^(1 + alpha) with face-averaged |z|."""
    if not alpha > 0.0:
        raise ValueError(f"alpha must be positive, got {alpha}")

    def integrand(frame: ScalarField, t: float) -> FaceField:
        weight = _abs_face_average(frame).map(lambda a: (a + 1.0) ** (-1.0 - alpha))
        return face_gradient(frame).squared() * weight

    return face_spacetime_integral(traj, integrand, rule)


def grad_lambda_norm(traj: FieldTrajectory, lam: float, rule: str = "right") -> float:
    upper = (traj.grid.dim + 2) / (traj.grid.dim + 1)
    if not (1.0 <= lam < upper):
        raise ValueError(f"lambda={lam} outside the admissible interval λ ∈ [1, (n+2)/(n+1)) = [1, {upper:.4g})")
    total = face_spacetime_integral(traj, lambda f, t: face_gradient(f).map(lambda g: np.abs(g) ** lam), rule)
    return total ** (1.0 / lam)


def lq_norm(traj: FieldTrajectory, q: float, rule: str = "left") -> float:
    upper = (traj.grid.dim + 2) / traj.grid.dim
    if not (1.0 <= q < upper):
        raise ValueError(f"q={q} outside the admissible interval q ∈ [1, (n+2)/n) = [1, {upper:.4g})")
    return spacetime_integral(traj, lambda f, t: np.abs(f.values) ** q, rule) ** (1.0 / q)


def face_measure(grid: Grid) -> float:
    """Total dual volume carried by the interior faces."""
    return sum(math.prod(grid.face_shape(a)) for a in range(grid.dim)) * grid.face_volume


def greens_constant(grid: Grid, dt: float, steps: int, quantity: Callable[[FieldTrajectory], float]) -> float:
    """Largest value of `quantity` over unit-mass spike solutions of the heat equation.

    Spikes sit in the centre cell and in the corner cell; by superposition
    this constant bounds the quantity per unit of L1 data for kappa = 0.
    """
    # local import: heat_solver depends on weak_forms only, functionals sits above it
    from heat_solver import HeatProblem, SolverConfig, solve_heat

    config = SolverConfig(dt=dt)
    best = 0.0
    centre = tuple(n // 2 for n in grid.cells)
    corner = tuple(0 for _ in grid.cells)
    for index in (centre, corner):
        values = np.zeros(grid.shape)
        values[index] = 1.0 / grid.cell_volume
        problem = HeatProblem.constant(grid, ScalarField(grid, values), 0.0, dt, steps)
        best = max(best, quantity(solve_heat(problem, steps * dt, config)))
    return best


# ---------------------------------------------------------------------------
# psi-weighted energies
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PsiSpec:
    family: str
    p: float | None = None
    spline: CubicSpline | None = field(default=None, repr=False)

    @classmethod
    def power(cls, p: float) -> PsiSpec:
        if not p > 1.0:
            raise ValueError(f"power psi needs p > 1, got {p}")
        return cls("power", p=p)

    @classmethod
    def tabulated(cls, knots: Sequence[float], values: Sequence[float]) -> PsiSpec:
        spec = cls("custom-tabulated", spline=CubicSpline(np.asarray(knots, float), np.asarray(values, float)))
        problems = spec.check_range(np.asarray(knots, float))
        if problems:
            raise ValueError("; ".join(problems))
        return spec

    def psi(self, s: NDArray) -> NDArray:
        if self.family == "power":
            return (np.asarray(s) + 1.0) ** self.p
        return self.spline(s)

    def psi_prime(self, s: NDArray) -> NDArray:
        if self.family == "power":
            return self.p * (np.asarray(s) + 1.0) ** (self.p - 1.0)
        return self.spline(s, 1)

    def psi_second(self, s: NDArray) -> NDArray:
        if self.family == "power":
            return self.p * (self.p - 1.0) * (np.asarray(s) + 1.0) ** (self.p - 2.0)
        return self.spline(s, 2)

    def check_range(self, samples: NDArray) -> list[str]:
        """Nonnegativity and convexity at the sampled points only."""
        samples = np.asarray(samples, dtype=np.float64).ravel()
        problems = []
        if np.any(self.psi(samples) < 0.0):
            problems.append("psi negative on the sampled range")
        if np.any(self.psi_second(samples) < -1e-12):
            problems.append("psi not convex on the sampled range")
        return problems


def psi_weighted_energy(traj: FieldTrajectory, psi: PsiSpec, rule: str = "right") -> float:
    """int int psi''(v) |grad v|^2 with psi'' at the face-averaged value."""

    def integrand(frame: ScalarField, t: float) -> FaceField:
        return face_gradient(frame).squared() * face_average(frame).map(psi.psi_second)

    return face_spacetime_integral(traj, integrand, rule)


def theta_weighted_energy(traj: FieldTrajectory, phi: PhiFunction, psi: PsiSpec, rule: str = "right") -> float:
    """int int theta(psi(v)) psi''(v) |grad v|^2 with theta = Phi'."""

    def integrand(frame: ScalarField, t: float) -> FaceField:
        weight = face_average(frame).map(lambda s: phi.phi_prime(psi.psi(s)) * psi.psi_second(s))
        return face_gradient(frame).squared() * weight

    return face_spacetime_integral(traj, integrand, rule)


# ---------------------------------------------------------------------------
# Dual norm surrogate
# ---------------------------------------------------------------------------


def dual_time_derivative_surrogate(traj: FieldTrajectory, tests: TestFunctionSet) -> float:
    """sum_n dt max_phi |int (z_{n+1} - z_n)/dt phi| over a fixed dictionary.

    A lower bound of the dual norm over the dictionary, never the norm itself.
    """
    if len(tests) == 0:
        raise ValueError("dual surrogate needs a nonempty dictionary")
    grid = traj.grid
    profiles = np.stack([m.space_cells(grid) for m in tests])
    total = 0.0
    for n in range(traj.steps):
        rate = (traj.frames[n + 1].values - traj.frames[n].values) / traj.dt
        pairings = np.abs(np.sum(profiles * rate, axis=tuple(range(1, grid.dim + 1)))) * grid.cell_volume
        total += traj.dt * float(np.max(pairings))
    return total


# ---------------------------------------------------------------------------
# Landes regularisation
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LandesParams:
    k: float
    sigma: float
    zeta: ScalarField

    def __post_init__(self):
        if not self.k > 0.0:
            raise ValueError(f"truncation level must be positive, got {self.k}")
        if not self.sigma > 0.0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


def landes_apply(traj: FieldTrajectory, params: LandesParams) -> FieldTrajectory:
    """eta_{n+1} = e^{-sigma dt} eta_n + (1 - e^{-sigma dt}) T_k v_{n+1}, eta_0 = T_k zeta."""
    decay = math.exp(-params.sigma * traj.dt)
    eta = truncate(params.zeta, params.k).values
    frames = [ScalarField(traj.grid, eta)]
    for frame in traj.frames[1:]:
        eta = decay * eta + (1.0 - decay) * np.clip(frame.values, -params.k, params.k)
        frames.append(ScalarField(traj.grid, eta))
    return FieldTrajectory(traj.grid, traj.dt, tuple(frames))


def landes_blend_weight(sigma: float, dt: float) -> float:
    """Weight a with eta_b = a eta_n + (1 - a) eta_{n+1} making
    (eta_{n+1} - eta_n)/dt = sigma (T_k v_{n+1} - eta_b) exact for the recursion."""
    x = sigma * dt
    decay = math.exp(-x)
    c = -math.expm1(-x) / x
    return (c - decay) / (1.0 - decay)


@dataclass
class LandesReport:
    step_residual: float
    initial_exact: bool
    linf_ok: bool
    sigmas: list[float]
    distances: list[float]
    tol: float

    @property
    def ladder_decreasing(self) -> bool:
        return all(b < a for a, b in zip(self.distances, self.distances[1:]))

    @property
    def passed(self) -> bool:
        return self.step_residual <= self.tol and self.initial_exact and self.linf_ok and self.ladder_decreasing


def landes_distance(traj: FieldTrajectory, eta: FieldTrajectory, k: float) -> float:
    """||eta - T_k v|| in L2((0, T); W^{1,2})."""
    total = 0.0
    for frame, e in zip(traj.frames[:-1], eta.frames[:-1]):
        diff = e - truncate(frame, k)
        total += integrate(diff.values**2, traj.grid) + face_integral(face_gradient(diff).squared())
    return math.sqrt(traj.dt * total)


def verify_landes(
    traj: FieldTrajectory,
    params: LandesParams,
    tol: float = 1e-10,
    sigma_ladder: Sequence[float] = (1.0, 4.0, 16.0, 64.0),
) -> LandesReport:
    eta = landes_apply(traj, params)
    a = landes_blend_weight(params.sigma, traj.dt)
    residual = 0.0
    for n in range(traj.steps):
        e0, e1 = eta.frames[n].values, eta.frames[n + 1].values
        target = np.clip(traj.frames[n + 1].values, -params.k, params.k)
        blend = a * e0 + (1.0 - a) * e1
        defect = (e1 - e0) / traj.dt - params.sigma * (target - blend)
        residual = max(residual, math.sqrt(integrate(defect**2, traj.grid)))
    initial_exact = bool(np.array_equal(eta.frames[0].values, truncate(params.zeta, params.k).values))
    linf_ok = all(np.max(np.abs(f.values)) <= params.k * (1.0 + 1e-12) for f in eta.frames)
    distances = []
    for sigma in sigma_ladder:
        ladder_params = LandesParams(params.k, sigma, params.zeta)
        distances.append(landes_distance(traj, landes_apply(traj, ladder_params), params.k))
    return LandesReport(residual, initial_exact, linf_ok, list(sigma_ladder), distances, tol)


# ---------------------------------------------------------------------------
# de la Vallee Poussin weight
# ---------------------------------------------------------------------------


@dataclass
class PhiFunction:
    """Phi_c(s) = 1 + c[(1+s) ln(1+s) - s] with Phi' = c ln(1+s), Phi'' = c/(1+s)."""

    c: float
    young_constant: float | None = None

    def phi(self, s: NDArray) -> NDArray:
        s = np.asarray(s, dtype=np.float64)
        return 1.0 + self.c * ((1.0 + s) * np.log1p(s) - s)

    def phi_prime(self, s: NDArray) -> NDArray:
        return self.c * np.log1p(np.asarray(s, dtype=np.float64))

    def phi_second(self, s: NDArray) -> NDArray:
        return self.c / (1.0 + np.asarray(s, dtype=np.float64))

    def knots(self, count: int = 10_000, s_max: float = 1e12) -> NDArray:
        return np.concatenate([[0.0], np.geomspace(1e-6, s_max, count - 1)])

    def check_knots(self, count: int = 10_000, s_max: float = 1e12) -> dict[str, bool]:
        s = self.knots(count, s_max)
        return {
            "phi_ge_one": bool(np.all(self.phi(s) >= 1.0)),
            "phi_prime_nonneg": bool(np.all(self.phi_prime(s) >= 0.0)),
            "phi_second_nonneg": bool(np.all(self.phi_second(s) >= 0.0)),
            "s_phi_second_le_one": bool(np.all(s * self.phi_second(s) <= 1.0)),
        }

    def superlinear_ratio(self, s0: float, s_max: float) -> float:
        """(Phi(s_max)/s_max) / (Phi(s0)/s0)."""
        return float((self.phi(s_max) / s_max) / (self.phi(s0) / s0))

    def integral(self, field: ScalarField) -> float:
        return integrate(self.phi(np.abs(field.values)), field.grid)


def tail_masses(fields: Sequence[ScalarField], levels: Sequence[float]) -> list[tuple[float, float]]:
    """(s, sup_z int_{|z|>s} |z|) for every level s."""
    out = []
    for s in levels:
        worst = 0.0
        for f in fields:
            a = np.abs(f.values)
            worst = max(worst, integrate(np.where(a > s, a, 0.0), f.grid))
        out.append((float(s), worst))
    return out


def concentrates(fields: Sequence[ScalarField], octaves: int = CONCENTRATION_OCTAVES) -> bool:
    """True when three or more members hold half their mass above half their peak
    and the largest such peak reaches 2^octaves times the mean level.
    """
    masses = [integrate(np.abs(f.values), f.grid) for f in fields]
    measure = math.prod(fields[0].grid.extents)
    mean_level = max(masses) / measure
    if mean_level <= 0.0:
        return False
    peaked = []
    for f, mass in zip(fields, masses):
        a = np.abs(f.values)
        peak = float(np.max(a))
        if peak < 4.0 * mean_level:
            continue
        if integrate(np.where(a > 0.5 * peak, a, 0.0), f.grid) >= 0.5 * mass:
            peaked.append(peak)
    return len(peaked) >= 3 and max(peaked) >= 2.0**octaves * mean_level


def build_dlvp_phi(
    families: Sequence[Sequence[ScalarField]],
    budget: float,
    young_range: float = 100.0,
    young_points: int = 400,
) -> PhiFunction:
    """Largest c in {1, 1/2, ..., 2^-20} with sup over all families of int Phi_c(|z|) <= budget.

    A concentrating family is refused at any budget: its integrals stay finite for every
    finite member but grow without bound along the family.
    """
    fields = [f for family in families for f in family]
    if not fields:
        raise ValueError("at least one nonempty family is required")
    if concentrates(fields):
        top = max(float(np.max(np.abs(f.values))) for f in fields)
        best = max(PhiFunction(C_LADDER[-1]).integral(f) for f in fields)
        levels = [top * 2.0**-j for j in range(6, -1, -1)]
        raise NotUniformlyIntegrableError(budget, best, tail_masses(fields, levels), concentrating=True)
    best = math.inf
    for c in C_LADDER:
        phi = PhiFunction(c)
        worst = max(phi.integral(f) for f in fields)
        best = min(best, worst)
        if worst <= budget:
            young_constant(phi, young_range, young_points)
            return phi
    top = max(float(np.max(np.abs(f.values))) for f in fields)
    levels = [top * 2.0**-j for j in range(6, -1, -1)]
    raise NotUniformlyIntegrableError(budget, best, tail_masses(fields, levels))


def young_constant(phi: PhiFunction, range_max: float, grid_points: int = 400) -> float:
    """Minimal c2 with a Phi'(b) <= Phi(a) + c2 Phi(b) on an (a, b) grid, plus 10% headroom."""
    if not range_max > 0.0:
        raise ValueError(f"range_max must be positive, got {range_max}")
    s = np.linspace(0.0, range_max, grid_points)
    a, b = np.meshgrid(s, s, indexing="ij")
    needed = (a * phi.phi_prime(b) - phi.phi(a)) / phi.phi(b)
    c2 = 1.1 * max(float(np.max(needed)), 0.0)
    phi.young_constant = c2
    return c2
