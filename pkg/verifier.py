"""
Verifier

Turns every estimate and solution concept into a computable report with an
explicit left side, right side and margin. Checker failures are results, not
exceptions: a report with passed=False is ordinary data.

Margins are signed so that a nonnegative margin means the inequality holds in
its stated direction; equality checks report -|lhs - rhs|.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import betainc

from chemotaxis import ChemoRun, lemma55_functional, lemma64_functionals
from functionals import (
    dual_time_derivative_surrogate,
    grad_lambda_norm,
    greens_constant,
    lq_norm,
    truncated_gradient_energy,
    weighted_gradient_energy,
)
from grid_core import (
    FaceField,
    FieldTrajectory,
    ScalarField,
    face_average,
    face_gradient,
    face_integral,
    integrate,
)
from heat_solver import HeatProblem, weak_residual
from weak_forms import (
    TestFunctionSet,
    dual_dictionary,
    paired_cells,
    paired_faces_grad,
    paired_faces_phi,
    time_term,
    time_term_values,
)

__all__ = [
    "EstimateReport",
    "PhiComposite",
    "PhiSupersolFamily",
    "TestFunctionSet",
    "Tolerance",
    "calibrate_discretization_constant",
    "check_dissipation_bounds",
    "check_g_budget",
    "check_heat_apriori",
    "check_lemma56",
    "check_ln_supersolution",
    "check_mass_budget",
    "check_phi_supersolution",
    "check_weak_solution_v",
    "digest_inputs",
]

SHAPE_ONLY = "constant unverifiable — inequality shape only"


@dataclass
class EstimateReport:
    lemma: str
    anchor: str
    lhs: float
    rhs: float
    margin: float
    passed: bool
    tolerance: float
    digest: str
    note: str = ""

    def to_row(self) -> dict:
        return {
            "lemma": self.lemma,
            "anchor": self.anchor,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "margin": self.margin,
            "passed": self.passed,
            "tolerance": self.tolerance,
            "digest": self.digest,
            "note": self.note,
        }


class Tolerance(BaseModel):
    """tol = model_rel * scale + discr_constant * (dt + h) * scale."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    model_rel: float = Field(default=1e-8, ge=0.0)
    discr_constant: float = Field(default=0.0, ge=0.0)

    def tol(self, scale: float, dt: float, h: float) -> float:
        scale = abs(scale)
        return self.model_rel * scale + self.discr_constant * (dt + h) * scale


def digest_inputs(*arrays: NDArray, **params) -> str:
    sha = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a, dtype=np.float64)
        sha.update(str(a.shape).encode())
        sha.update(a.tobytes())
    sha.update(json.dumps(params, sort_keys=True, default=str).encode())
    return sha.hexdigest()[:16]


def _inequality(lemma, anchor, lhs, rhs, tol, digest, note="") -> EstimateReport:
    margin = rhs - lhs
    return EstimateReport(lemma, anchor, lhs, rhs, margin, margin >= -tol, tol, digest, note)


def _equality(lemma, anchor, lhs, rhs, tol, digest, note="") -> EstimateReport:
    margin = -abs(lhs - rhs)
    return EstimateReport(lemma, anchor, lhs, rhs, margin, margin >= -tol, tol, digest, note)


def calibrate_discretization_constant(
    measure: Callable[[float, float], tuple[float, float]],
    ladder: Sequence[tuple[float, float]],
) -> float:
    """Smallest C with residual <= C (dt + h) scale on every (dt, h) rung, plus 50%.

    `measure(dt, h)` returns (residual, scale) for one rung.
    """
    if not ladder:
        raise ValueError("calibration ladder is empty")
    worst = 0.0
    for dt, h in ladder:
        residual, scale = measure(dt, h)
        if scale > 0.0:
            worst = max(worst, abs(residual) / ((dt + h) * scale))
    return 1.5 * worst


# ---------------------------------------------------------------------------
# Heat a-priori estimates
# ---------------------------------------------------------------------------


def _source_l1(problem: HeatProblem, steps: int, theta: float) -> float:
    frames = problem.f.frames
    dt = problem.f.dt
    return dt * sum(
        theta * integrate(np.abs(frames[n + 1].values), problem.grid)
        + (1.0 - theta) * integrate(np.abs(frames[n].values), problem.grid)
        for n in range(steps)
    )


def _source_mass(problem: HeatProblem, steps: int, theta: float) -> float:
    frames = problem.f.frames
    dt = problem.f.dt
    return dt * sum(theta * integrate(frames[n + 1]) + (1.0 - theta) * integrate(frames[n]) for n in range(steps))


def check_heat_apriori(
    traj: FieldTrajectory,
    problem: HeatProblem,
    tolerance: Tolerance = Tolerance(),
    theta: float = 1.0,
    q_values: Sequence[float] = (1.0, 1.5),
    lambda_values: Sequence[float] = (1.0, 1.1),
) -> list[EstimateReport]:
    """Mass identity, L1 bound, truncated and weighted energy bounds, the
    measured-constant L^q and gradient-L^lambda shapes, and the dual surrogate."""
    if problem.kappa != 0.0:
        raise ValueError("a-priori checks need kappa = 0; apply exponential_rescale first")
    grid, dt, steps = traj.grid, traj.dt, traj.steps
    h = grid.min_spacing
    digest = digest_inputs(traj.stack(), kappa=problem.kappa, theta=theta)
    z0 = integrate(np.abs(problem.v0.values), grid)
    data = z0 + _source_l1(problem, steps, theta)
    reports = []

    mass_end = integrate(traj.final)
    mass_rhs = integrate(problem.v0) + _source_mass(problem, steps, theta)
    reports.append(
        _equality("Lemma 2.1", "Lemma 2.1 mass identity", mass_end, mass_rhs,
                  tolerance.tol(max(abs(mass_rhs), data), dt, h), digest)
    )
    sup_l1 = max(integrate(np.abs(f.values), grid) for f in traj.frames)
    reports.append(
        _inequality("Lemma 2.1", "Lemma 2.1 sup L1 LHS/RHS", sup_l1, data, tolerance.tol(data, dt, h), digest)
    )

    for k in (1.0, 2.0, 4.0, 8.0):
        lhs = truncated_gradient_energy(traj, k)
        rhs = 2.0 * k * data
        reports.append(
            _inequality(f"Lemma 2.2 k={k:g}", "Lemma 2.2 LHS/RHS", lhs, rhs, tolerance.tol(rhs, dt, h), digest)
        )

    for alpha in (0.5, 1.0, 2.0):
        lhs = weighted_gradient_energy(traj, alpha)
        rhs = 4.0 / (1.0 - 2.0**-alpha) * data
        reports.append(
            _inequality(f"Lemma 2.3 alpha={alpha:g}", "Lemma 2.3 LHS/RHS", lhs, rhs,
                        tolerance.tol(rhs, dt, h), digest)
        )

    for q in q_values:
        constant = greens_constant(grid, dt, steps, lambda t: lq_norm(t, q))
        lhs, rhs = lq_norm(traj, q), constant * data
        reports.append(
            _inequality(f"Lemma 2.4 q={q:g}", "Lemma 2.4 LHS/RHS", lhs, rhs, tolerance.tol(rhs, dt, h), digest,
                        f"{SHAPE_ONLY}; measured constant {constant:.6g}")
        )
    for lam in lambda_values:
        constant = greens_constant(grid, dt, steps, lambda t: grad_lambda_norm(t, lam))
        lhs, rhs = grad_lambda_norm(traj, lam), constant * data
        reports.append(
            _inequality(f"Lemma 2.5 lambda={lam:g}", "Lemma 2.5 LHS/RHS", lhs, rhs, tolerance.tol(rhs, dt, h),
                        digest, f"{SHAPE_ONLY}; measured constant {constant:.6g}")
        )

    surrogate = dual_time_derivative_surrogate(traj, dual_dictionary(grid))
    bound = dual_surrogate_bound(traj, problem)
    reports.append(
        _inequality("Lemma 2.6", "Lemma 2.6 surrogate/RHS", surrogate, bound, tolerance.tol(bound, dt, h), digest,
                    "dual norm surrogate over a fixed dictionary (lower bound of the norm)")
    )
    return reports


def dual_surrogate_bound(traj: FieldTrajectory, problem: HeatProblem) -> float:
    """sum_n dt (||grad z_{n+1}||_1 + ||f_{n+1}||_1 + |kappa| ||z_{n+1}||_1)."""
    grid = traj.grid
    total = 0.0
    for n in range(traj.steps):
        z = traj.frames[n + 1]
        total += face_integral(face_gradient(z).map(np.abs))
        total += integrate(np.abs(problem.f.frames[n + 1].values), grid)
        total += abs(problem.kappa) * integrate(np.abs(z.values), grid)
    return traj.dt * total


# ---------------------------------------------------------------------------
# Weak equation for v
# ---------------------------------------------------------------------------


def chemo_v_residuals(run: ChemoRun, tests: TestFunctionSet) -> list[float]:
    """LHS - RHS of -int int v phi_t - int v0 phi0 = -int int grad v . grad phi - int int r v phi + int int s phi."""
    grid, dt, steps = run.grid, run.dt, run.steps
    us, vs = run.u_traj.frames, run.v_traj.frames
    coeffs = [run.system.v_coefficients(us[n].values, vs[n].values) for n in range(steps)]
    grads = [face_gradient(v) for v in vs]
    residuals = []
    for test in tests:
        lhs = time_term(run.v_traj, test)
        rhs = -paired_faces_grad(grid, dt, steps, test, lambda n: grads[n + 1])
        rhs -= paired_cells(grid, dt, steps, test, lambda n: coeffs[n][0] * vs[n + 1].values)
        rhs += paired_cells(grid, dt, steps, test, lambda n: coeffs[n][1] + np.zeros(grid.shape))
        residuals.append(lhs - rhs)
    return residuals


def check_weak_solution_v(
    subject: FieldTrajectory | ChemoRun,
    tests: TestFunctionSet,
    problem: HeatProblem | None = None,
    tolerance: Tolerance = Tolerance(),
) -> EstimateReport:
    """max |weak residual| over the test set against tol_weak = tol(data norm)."""
    if isinstance(subject, ChemoRun):
        residuals = chemo_v_residuals(subject, tests)
        traj = subject.v_traj
        coeffs = [subject.system.v_coefficients(u.values, v.values)
                  for u, v in zip(subject.u_traj.frames[:-1], subject.v_traj.frames[:-1])]
        forcing = traj.dt * sum(integrate(np.abs(s) + np.zeros(traj.grid.shape), traj.grid) for _, s in coeffs)
        scale = integrate(np.abs(traj.frames[0].values), traj.grid) + forcing
        anchor = f"Definition weak v-equation (system {subject.system.variant})"
        digest = digest_inputs(subject.u_traj.stack(), traj.stack(), variant=subject.system.variant)
    else:
        if problem is None:
            raise ValueError("a heat trajectory needs its HeatProblem")
        traj = subject
        residuals = weak_residual(traj, problem, tests)
        scale = integrate(np.abs(problem.v0.values), traj.grid) + _source_l1(problem, traj.steps, 1.0)
        anchor = "weak heat equation residual"
        digest = digest_inputs(traj.stack(), kappa=problem.kappa)
    worst = max((abs(r) for r in residuals), default=0.0)
    worst_label = tests.labels[int(np.argmax(np.abs(residuals)))] if residuals else ""
    tol = tolerance.tol(max(scale, 1.0), traj.dt, traj.grid.min_spacing)
    return _equality("weak v-equation", anchor, worst, 0.0, tol, digest,
                     f"max over {len(residuals)} tests, worst '{worst_label}'")


# ---------------------------------------------------------------------------
# phi-supersolutions for system A
# ---------------------------------------------------------------------------


def _bump_cdf(x: NDArray, a: float, b: float) -> NDArray:
    s = np.clip((np.asarray(x, dtype=np.float64) - a) / (b - a), 0.0, 1.0)
    return betainc(4.0, 4.0, s)


def _bump_density(x: NDArray, a: float, b: float) -> NDArray:
    s = (np.asarray(x, dtype=np.float64) - a) / (b - a)
    inside = (s > 0.0) & (s < 1.0)
    return np.where(inside, 140.0 * s**3 * (1.0 - s) ** 3 / (b - a), 0.0)


def _bump_density_prime(x: NDArray, a: float, b: float) -> NDArray:
    s = (np.asarray(x, dtype=np.float64) - a) / (b - a)
    inside = (s > 0.0) & (s < 1.0)
    d = 140.0 * (3.0 * s**2 * (1.0 - s) ** 3 - 3.0 * s**3 * (1.0 - s) ** 2) / (b - a) ** 2
    return np.where(inside, d, 0.0)


@dataclass(frozen=True)
class PhiComposite:
    """phi(u, v) = B(u) C(v) with B'' = -rho_u and C = 1 + gamma R_v (R_v the bump cdf)."""

    u_lo: float
    u_hi: float
    v_lo: float = 0.0
    v_hi: float = 1.0
    gamma: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.u_lo < self.u_hi and 0.0 <= self.v_lo < self.v_hi):
            raise ValueError("bump intervals must be nonempty and nonnegative")
        if self.gamma < 0.0:
            raise ValueError("gamma must be nonnegative so that C >= 0")

    @property
    def label(self) -> str:
        return f"B[{self.u_lo:g},{self.u_hi:g}]*C(gamma={self.gamma:g})"

    def _b(self, u):
        u = np.asarray(u, dtype=np.float64)
        width = self.u_hi - self.u_lo
        s = np.clip((u - self.u_lo) / width, 0.0, 1.0)
        inner = s * betainc(4.0, 4.0, s) - 0.5 * betainc(5.0, 4.0, s)
        return u - width * inner - np.maximum(u - self.u_hi, 0.0)

    def _b1(self, u):
        return 1.0 - _bump_cdf(u, self.u_lo, self.u_hi)

    def _b2(self, u):
        return -_bump_density(u, self.u_lo, self.u_hi)

    def _c(self, v):
        return 1.0 + self.gamma * _bump_cdf(v, self.v_lo, self.v_hi)

    def _c1(self, v):
        return self.gamma * _bump_density(v, self.v_lo, self.v_hi)

    def _c2(self, v):
        return self.gamma * _bump_density_prime(v, self.v_lo, self.v_hi)

    def phi(self, u, v):
        return self._b(u) * self._c(v)

    def phi_u(self, u, v):
        return self._b1(u) * self._c(v)

    def phi_v(self, u, v):
        return self._b(u) * self._c1(v)

    def phi_uu(self, u, v):
        return self._b2(u) * self._c(v)

    def phi_uv(self, u, v):
        return self._b1(u) * self._c1(v)

    def phi_vv(self, u, v):
        return self._b(u) * self._c2(v)


@dataclass(frozen=True)
class PhiSupersolFamily:
    members: tuple[PhiComposite, ...]

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def validate(self, samples: int = 200) -> list[str]:
        problems = []
        for m in self.members:
            u = np.linspace(0.0, 2.0 * m.u_hi, samples)
            v = np.linspace(0.0, 2.0 * m.v_hi, samples)
            uu, vv = np.meshgrid(u, v, indexing="ij")
            if np.any(m.phi_uu(uu, vv) > 0.0):
                problems.append(f"{m.label}: phi_uu > 0 somewhere on the sample grid")
            corner_u, corner_v = 1.5 * m.u_hi, 1.5 * m.v_hi
            if m.phi_u(corner_u, corner_v) != 0.0 or m.phi_v(corner_u, corner_v) != 0.0:
                problems.append(f"{m.label}: D phi nonzero at the far corner")
        return problems

    @classmethod
    def standard(cls, u_max: float, v_max: float, rising: bool = True) -> PhiSupersolFamily:
        """Three u-bumps (one beyond the range, where phi = u) times flat and rising C."""
        u_top, v_top = max(u_max, 1e-3), max(v_max, 1e-3)
        bumps = ((0.25 * u_top, 1.25 * u_top), (0.5 * u_top, 2.0 * u_top), (2.0 * u_top, 3.0 * u_top))
        gammas = (0.0, 0.5) if rising else (0.0,)
        members = tuple(
            PhiComposite(lo, hi, 0.5 * v_top, 1.5 * v_top, gamma) for lo, hi in bumps for gamma in gammas
        )
        return cls(members)


def _face_dot(a: FaceField, b: FaceField) -> FaceField:
    return a * b


def _phi_step_terms(run: ChemoRun, member: PhiComposite, n: int):
    """Face terms paired with phi, face terms paired with grad phi and cell terms for step n."""
    system = run.system
    u_prev = run.u_traj.frames[n].values
    u, v = run.u_traj.frames[n + 1], run.v_traj.frames[n + 1]
    uf, vf = face_average(u), face_average(v)
    gu, gv = face_gradient(u), face_gradient(v)

    def at_faces(fn):
        return uf.combine(vf, fn)

    p_u, p_v = at_faces(member.phi_u), at_faces(member.phi_v)
    p_uu, p_uv, p_vv = at_faces(member.phi_uu), at_faces(member.phi_uv), at_faces(member.phi_vv)
    face_phi = (
        (p_uu * gu.squared()) * -1.0
        - (p_vv - uf * p_uv) * gv.squared()
        - (p_uv * 2.0 - uf * p_uu) * _face_dot(gu, gv)
    )
    face_grad = (p_u * gu) * -1.0 - (p_v - uf * p_u) * gv
    s_n = u_prev / (1.0 + system.eps * u_prev)
    cells = (
        system.g.g(u_prev) * member.phi_u(u.values, v.values)
        - v.values * member.phi_v(u.values, v.values)
        + s_n * member.phi_v(u.values, v.values)
    )
    return face_phi, face_grad, cells


def _scaled_tol(tolerance: Tolerance, lhs: float, rhs: float, run: ChemoRun) -> float:
    return tolerance.tol(max(abs(lhs), abs(rhs)), run.dt, run.grid.min_spacing)


def check_phi_supersolution(
    run: ChemoRun,
    family: PhiSupersolFamily,
    tests: TestFunctionSet,
    tolerance: Tolerance = Tolerance(),
) -> list[EstimateReport]:
    """LHS - RHS >= -tol for every (phi, test) pair, LHS = -int int phi(u,v) test_t - int phi(u0,v0) test(0)."""
    if run.system.variant != "A":
        raise ValueError("phi-supersolutions are defined for system A runs")
    tests = tests.nonnegative_only()
    if len(tests) == 0:
        raise ValueError("phi-supersolution checks need nonnegative test functions")
    grid, dt, steps = run.grid, run.dt, run.steps
    base_digest = digest_inputs(run.u_traj.stack(), run.v_traj.stack(), variant="A")
    reports = []
    for member in family:
        states = [member.phi(u.values, v.values) for u, v in zip(run.u_traj.frames, run.v_traj.frames)]
        terms = [_phi_step_terms(run, member, n) for n in range(steps)]
        for test in tests:
            lhs = time_term_values(states, grid, dt, test)
            rhs = paired_faces_phi(grid, dt, steps, test, lambda n: terms[n][0])
            rhs += paired_faces_grad(grid, dt, steps, test, lambda n: terms[n][1])
            rhs += paired_cells(grid, dt, steps, test, lambda n: terms[n][2])
            tol = _scaled_tol(tolerance, lhs, rhs, run)
            margin = lhs - rhs
            reports.append(
                EstimateReport(
                    f"Definition 5.1 {member.label} x {test.label}",
                    "Definition 5.1 phi-supersolution LHS/RHS",
                    lhs, rhs, margin, margin >= -tol, tol,
                    digest_inputs(base_digest=base_digest, phi=member.label, test=test.label, amp=test.amplitude),
                    f"sampled family of {len(family)} phi and {len(tests)} tests",
                )
            )
    return reports


# ---------------------------------------------------------------------------
# ln-supersolutions for systems B and C
# ---------------------------------------------------------------------------


def _ln_step_terms(run: ChemoRun, n: int):
    system = run.system
    chi, eps = system.chi, system.eps
    u_prev = run.u_traj.frames[n].values
    u, v = run.u_traj.frames[n + 1], run.v_traj.frames[n + 1]
    uf, vf = face_average(u), face_average(v)
    gu, gv = face_gradient(u), face_gradient(v)
    taxis = uf.combine(vf, lambda a, b: chi * a / ((1.0 + eps * a) * (a + 1.0) * b))
    inv = uf.map(lambda a: 1.0 / (a + 1.0))
    face_phi = gu.squared() * inv.squared() - taxis * inv * _face_dot(gu, gv)
    face_grad = gu * inv * -1.0 + taxis * gv
    if system.g is not None:
        cells = system.g.g(u_prev) / (u.values + 1.0)
    else:
        cells = np.zeros(run.grid.shape)
    return face_phi, face_grad, cells


def check_ln_supersolution(
    run: ChemoRun,
    tests: TestFunctionSet,
    tolerance: Tolerance = Tolerance(),
) -> EstimateReport:
    """Worst test of -int int ln(u+1) test_t - int ln(u0+1) test(0) >= RHS."""
    if run.system.variant not in ("B", "C"):
        raise ValueError("ln-supersolutions are defined for systems B and C")
    tests = tests.nonnegative_only()
    if len(tests) == 0:
        raise ValueError("ln-supersolution checks need nonnegative test functions")
    grid, dt, steps = run.grid, run.dt, run.steps
    states = [np.log1p(u.values) for u in run.u_traj.frames]
    terms = [_ln_step_terms(run, n) for n in range(steps)]
    worst = None
    for test in tests:
        lhs = time_term_values(states, grid, dt, test)
        rhs = paired_faces_phi(grid, dt, steps, test, lambda n: terms[n][0])
        rhs += paired_faces_grad(grid, dt, steps, test, lambda n: terms[n][1])
        rhs += paired_cells(grid, dt, steps, test, lambda n: terms[n][2])
        tol = _scaled_tol(tolerance, lhs, rhs, run)
        slack = lhs - rhs + tol
        if worst is None or slack < worst[0]:
            worst = (slack, lhs, rhs, tol, test)
    _, lhs, rhs, tol, test = worst
    margin = lhs - rhs
    variant = run.system.variant
    definition = "Definition 6.1" if variant == "B" else "Definition 7.1"
    return EstimateReport(
        f"{definition} ln-supersolution",
        f"{definition} ln(u+1) LHS/RHS",
        lhs, rhs, margin, margin >= -tol, tol,
        digest_inputs(run.u_traj.stack(), run.v_traj.stack(), variant=variant),
        f"worst of {len(tests)} tests: {test.label}",
    )


# ---------------------------------------------------------------------------
# Mass, dampening and dissipation
# ---------------------------------------------------------------------------


def check_mass_budget(run: ChemoRun, tolerance: Tolerance = Tolerance()) -> EstimateReport:
    """Equality int u(t) = int u0 for system B, int u(t) <= int u0 + int_0^t int g(u) otherwise."""
    grid, dt = run.grid, run.dt
    masses = [integrate(u) for u in run.u_traj.frames]
    start = masses[0]
    digest = digest_inputs(run.u_traj.stack(), variant=run.system.variant)
    h = grid.min_spacing
    if run.system.variant == "B":
        diffs = [abs(m - start) for m in masses]
        n = int(np.argmax(diffs))
        return _equality("Definition 6.1 mass", "Definition 6.1 int u(t) = int u0", masses[n], start,
                         tolerance.tol(start, dt, h), digest, f"worst frame {n}")
    budget = [start]
    for u in run.u_traj.frames[:-1]:
        budget.append(budget[-1] + dt * integrate(run.system.g.g(u.values), grid))
    margins = [b - m for m, b in zip(masses, budget)]
    n = int(np.argmin(margins))
    definition = "Definition 5.1" if run.system.variant == "A" else "Definition 7.1"
    scale = max(start, max(abs(b) for b in budget))
    return _inequality(f"{definition} mass", f"{definition} int u(t) <= int u0 + int int g(u)",
                       masses[n], budget[n], tolerance.tol(scale, dt, h), digest, f"worst frame {n}")


def check_g_budget(run: ChemoRun, tolerance: Tolerance = Tolerance()) -> EstimateReport:
    """int int |g(u)| <= |Omega| T g_max + int u0."""
    g = run.system.g
    if g is None:
        raise ValueError("system B has no dampening term")
    grid, dt = run.grid, run.dt
    lhs = dt * sum(integrate(np.abs(g.g(u.values)), grid) for u in run.u_traj.frames[:-1])
    rhs = grid.measure * run.t_end * g.g_max + integrate(run.u_traj.frames[0])
    return _inequality("basic a-priori |g| budget", "int int |g(u)| LHS/RHS", lhs, rhs,
                       tolerance.tol(rhs, dt, grid.min_spacing),
                       digest_inputs(run.u_traj.stack(), lam=g.lam, mu=g.mu, beta=g.beta))


def check_lemma56(
    run: ChemoRun, p: float, kappa: float, h_level: float, tolerance: Tolerance = Tolerance()
) -> EstimateReport:
    """||1_{u,v<=h} grad u|| <= (h+1)^{p+1} e^{kappa h}/p (||grad w|| + kappa ||1_{v<=h} grad v||),
    w = (u+1)^{-p} e^{-kappa v}, norms in L2 over space-time; a face counts when both cells qualify."""
    if not p > 0.0 or kappa < 0.0 or not h_level > 0.0:
        raise ValueError("need p > 0, kappa >= 0 and h > 0")
    grid, dt = run.grid, run.dt
    lhs_sq = grad_w_sq = grad_v_sq = 0.0
    for u, v in zip(run.u_traj.frames[1:], run.v_traj.frames[1:]):
        low_v = (v.values <= h_level).astype(np.float64)
        low_uv = low_v * (u.values <= h_level)
        ind_uv = face_average(ScalarField(grid, low_uv)).map(lambda a: (a == 1.0).astype(np.float64))
        ind_v = face_average(ScalarField(grid, low_v)).map(lambda a: (a == 1.0).astype(np.float64))
        w = ScalarField(grid, (np.maximum(u.values, 0.0) + 1.0) ** -p * np.exp(-kappa * v.values))
        lhs_sq += face_integral(face_gradient(u).squared() * ind_uv)
        grad_w_sq += face_integral(face_gradient(w).squared())
        grad_v_sq += face_integral(face_gradient(v).squared() * ind_v)
    lhs = math.sqrt(dt * lhs_sq)
    factor = (h_level + 1.0) ** (p + 1.0) * math.exp(kappa * h_level) / p
    rhs = factor * (math.sqrt(dt * grad_w_sq) + kappa * math.sqrt(dt * grad_v_sq))
    return _inequality(f"Lemma 5.6 p={p:g} kappa={kappa:g} h={h_level:g}", "Lemma 5.6 LHS/RHS", lhs, rhs,
                       tolerance.tol(rhs, dt, grid.min_spacing),
                       digest_inputs(run.u_traj.stack(), run.v_traj.stack(), p=p, kappa=kappa, h=h_level))


def quasi_energy_margins(run: ChemoRun) -> tuple[list[float], list[float]]:
    """Per-step slack of dQ/dt <= -1/2 int |grad u|^2/(u+1)^2 - chi^2/2 int |grad v|^2/v^2
    + int |g(u)| + chi^2 int u, together with the scale of the right side. System C only."""
    system = run.system
    if system.variant != "C":
        raise ValueError("the quasi-energy is a system C diagnostic")
    chi2 = system.chi**2
    diags = run.diagnostics
    margins, scales = [], []
    for n in range(run.steps):
        u = run.u_traj.frames[n]
        q0, q1 = diags[n].quasi_energy, diags[n + 1].quasi_energy
        dissipation = 0.5 * diags[n + 1].grad_ln_u + 0.5 * chi2 * diags[n + 1].grad_ln_v
        production = integrate(np.abs(system.g.g(u.values)), run.grid) + chi2 * integrate(u)
        margins.append(-dissipation + production - (q1 - q0) / run.dt)
        scales.append(1.0 + dissipation + production)
    return margins, scales


def check_dissipation_bounds(
    run: ChemoRun,
    tolerance: Tolerance = Tolerance(),
    pk_grid: Sequence[tuple[float, float]] = ((0.5, 0.5), (0.5, 1.0), (1.0, 0.5), (1.0, 1.0)),
    r: float = 1.5,
) -> list[EstimateReport]:
    system = run.system
    grid, dt = run.grid, run.dt
    h = grid.min_spacing
    digest = digest_inputs(run.u_traj.stack(), run.v_traj.stack(), variant=system.variant)
    reports = []
    if system.g is not None:
        reports.append(check_g_budget(run, tolerance))

    if system.variant == "A":
        level = max(run.u_traj.frames[0].max(), run.v_traj.frames[0].max(), 1.0)
        for p, kappa in pk_grid:
            value = lemma55_functional(run, p, kappa)
            reports.append(
                EstimateReport(f"Lemma 5.5 p={p:g} kappa={kappa:g}", "Lemma 5.5 value", value, math.inf, math.inf,
                               math.isfinite(value), 0.0, digest, "value only; boundedness across eps in sweeps")
            )
            reports.append(check_lemma56(run, p, kappa, level, tolerance))

    if system.variant == "B":
        v0_min = run.v_traj.frames[0].min()
        worst = min(
            (v.min() - v0_min * math.exp(-t), v.min(), v0_min * math.exp(-t))
            for v, t in zip(run.v_traj.frames, run.v_traj.times)
        )
        reports.append(
            _inequality("Lemma 6.3", "Lemma 6.3 min v >= min v0 e^{-t}", worst[2], worst[1],
                        tolerance.tol(v0_min, dt, h), digest)
        )
        log_grad, power = lemma64_functionals(run, r)
        for name, value in (("int int |grad u|^2/(u+1)^2", log_grad), (f"int int u^{r:g}", power)):
            reports.append(
                EstimateReport(f"Lemma 6.4 {name}", "Lemma 6.4 value", value, math.inf, math.inf,
                               math.isfinite(value), 0.0, digest, "value only; boundedness across eps in sweeps")
            )

    if system.variant == "C":
        v_cap = run.v_traj.frames[0].max()
        v_top = max(v.max() for v in run.v_traj.frames)
        reports.append(
            _inequality("Lemma 7.2", "Lemma 7.2 v <= ||v0||_inf", v_top, v_cap, tolerance.tol(v_cap, dt, h), digest)
        )
        margins, scales = quasi_energy_margins(run)
        n = int(np.argmin(margins)) if margins else 0
        tol = tolerance.tol(scales[n], dt, h) if margins else 0.0
        margin = margins[n] if margins else 0.0
        reports.append(
            EstimateReport("Lemma 7.3", "Lemma 7.3 quasi-energy step inequality", -margin, 0.0, margin,
                           margin >= -tol, tol, digest,
                           f"worst step {n}; production coefficient chi^2 int u, v-exponent 2")
        )
    return reports

