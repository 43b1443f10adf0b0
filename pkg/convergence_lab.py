"""
Convergence lab

Builds eps-ladders of regularised data, solves every member and reduces the
sweep to Cauchy ladders: successive differences d_j of a quantity between
neighbouring rungs, with a fitted decay rate and a verdict.

Verdict policy: a ladder is cauchy-decreasing when its last ceil(J/2) rungs
decrease strictly and d_J <= 0.2 d_0; diverging when d_J > 2 d_0; stagnant
otherwise. Ladders test the full built-in sequences, never subsequences.
"""

from __future__ import annotations

import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy import ndimage
from scipy.stats import linregress
from simple_error_log.errors import Errors

from chemotaxis import ChemoRun, ChemoSystem, lemma64_functionals, solve_chemo
from functionals import (
    PhiFunction,
    PsiSpec,
    build_dlvp_phi,
    gradient_energy,
    grad_lambda_norm,
    theta_weighted_energy,
    truncated_gradient_energy,
    weighted_gradient_energy,
)
from grid_core import FieldTrajectory, Grid, ScalarField, face_average, face_gradient, integrate
from heat_solver import HeatProblem, SolverConfig, solve_heat, steps_for

DECREASE_FACTOR = 0.2
DIVERGE_FACTOR = 2.0

Verdict = Literal["cauchy-decreasing", "stagnant", "diverging"]


class HypothesisRefusal(RuntimeError):
    def __init__(self, message: str, ladders: dict[str, ConvergenceReport]):
        super().__init__(message)
        self.ladders = ladders


# ---------------------------------------------------------------------------
# Data families
# ---------------------------------------------------------------------------


class DataFamilySpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["mollified-spike", "top-hat-spike", "truncated-power", "oscillating", "heavy-tail", "custom"]
    mass: float = Field(default=1.0, gt=0.0)
    gamma: float = Field(default=0.5, gt=0.0, le=1.0)
    width_scale: float = Field(default=0.1, gt=0.0)
    spike_radius: float = Field(default=0.05, gt=0.0)
    center: tuple[float, ...] | None = None
    power: float = Field(default=0.5, gt=0.0)
    source: float = 0.0
    value: float = 1.0

    @field_validator("center")
    @classmethod
    def _center_inside(cls, v):
        if v is not None and any(not 0.0 <= c <= 1.0 for c in v):
            raise ValueError("center is given as fractions of the extents, each in [0, 1]")
        return v

    def width(self, eps: float) -> float:
        return self.width_scale * eps**self.gamma


@dataclass(frozen=True, eq=False)
class DataMember:
    eps: float
    v0: ScalarField
    f: FieldTrajectory


def eps_ladder(levels: int, start: int = 0) -> list[float]:
    """eps_j = 2^-j for j = start..levels."""
    if levels < start:
        raise ValueError(f"ladder end {levels} precedes its start {start}")
    return [2.0**-j for j in range(start, levels + 1)]


def _radius(grid: Grid, spec: DataFamilySpec) -> np.ndarray:
    center = spec.center or (0.5,) * grid.dim
    if len(center) != grid.dim:
        raise ValueError(f"center has {len(center)} entries for a {grid.dim}D grid")
    mesh = grid.mesh()
    return np.sqrt(sum((x - c * e) ** 2 for x, c, e in zip(mesh, center, grid.extents)))


def _normalise(values: np.ndarray, grid: Grid, mass: float) -> ScalarField:
    total = integrate(values, grid)
    if not total > 0.0:
        raise ValueError("data profile has no positive mass on this grid")
    return ScalarField(grid, values * (mass / total))


def _resolve(width: float, grid: Grid, eps: float):
    if width < 2.0 * grid.min_spacing:
        raise ValueError(
            f"grid cannot resolve this ε; refine or shorten ladder (eps={eps:g}, width {width:.4g} < 2h = "
            f"{2.0 * grid.min_spacing:.4g})"
        )


def _spike(grid: Grid, spec: DataFamilySpec) -> np.ndarray:
    r = _radius(grid, spec)
    radius = max(spec.spike_radius, 0.5 * grid.min_spacing)
    return np.where(r <= radius, 1.0, 0.0)


def _bump(grid: Grid) -> np.ndarray:
    out = np.ones(grid.shape)
    for x, e in zip(grid.mesh(), grid.extents):
        out = out * (4.0 * x * (e - x) / (e * e)) ** 3
    return out


def make_data_family(
    spec: DataFamilySpec, grid: Grid, t_end: float, dt: float, eps_values: Sequence[float]
) -> list[DataMember]:
    """Deterministic (v0_eps, f_eps) pairs, constant in time for f."""
    steps = steps_for(t_end, dt)
    members = []
    for j, eps in enumerate(eps_values):
        if not eps > 0.0:
            raise ValueError(f"eps must be positive, got {eps}")
        width = spec.width(eps)
        source = np.full(grid.shape, spec.source)
        if spec.kind == "custom":
            v0 = ScalarField.constant(grid, spec.value)
        elif spec.kind in ("mollified-spike", "oscillating"):
            _resolve(width, grid, eps)
            sigma = tuple(width / h for h in grid.spacing)
            smooth = ndimage.gaussian_filter(_spike(grid, spec), sigma=sigma, mode="reflect", truncate=4.0)
            v0 = _normalise(smooth, grid, spec.mass)
            if spec.kind == "oscillating":
                source = (-1.0) ** j * (spec.source or 1.0) * _bump(grid)
        elif spec.kind == "top-hat-spike":
            _resolve(width, grid, eps)
            size = tuple(2 * max(1, round(width / h)) + 1 for h in grid.spacing)
            smooth = ndimage.uniform_filter(_spike(grid, spec), size=size, mode="reflect")
            v0 = _normalise(smooth, grid, spec.mass)
        elif spec.kind == "truncated-power":
            if not spec.power < grid.dim:
                raise ValueError(f"truncated-power needs a < n = {grid.dim} for an L1 limit, got {spec.power}")
            _resolve(width, grid, eps)
            r = _radius(grid, spec)
            cap = width**-spec.power
            with np.errstate(divide="ignore"):
                profile = np.minimum(np.where(r > 0.0, r**-spec.power, np.inf), cap)
            v0 = _normalise(profile, grid, spec.mass)
        else:
            _resolve(width, grid, eps)
            spike = np.where(_radius(grid, spec) <= width, width ** (-0.5 * grid.dim), 0.0)
            base = (spec.mass - integrate(spike, grid)) / grid.measure
            if base <= 0.0:
                raise ValueError("heavy-tail spike carries more than the target mass; lower width_scale")
            v0 = ScalarField(grid, base + spike)
        frame = ScalarField(grid, source)
        members.append(DataMember(eps, v0, FieldTrajectory(grid, dt, (frame,) * (steps + 1))))
    return members


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepTemplate:
    """What every member solves: the heat equation, or a chemotaxis system whose
    eps follows the ladder with u0 = v0_eps and a constant initial signal."""

    kind: Literal["heat", "chemo"] = "heat"
    kappa: float = 0.0
    system: ChemoSystem | None = None
    v_init: float = 1.0


@dataclass
class SweepResult:
    eps: list[float]
    members: list[DataMember]
    runs: list[FieldTrajectory | ChemoRun]
    tables: list[dict[str, float]]
    template: SweepTemplate
    gamma: float | None = None
    degenerate: bool = False

    @property
    def trajectories(self) -> list[FieldTrajectory]:
        """The Cauchy field of every member: v for heat, u for chemotaxis."""
        return [r.u_traj if isinstance(r, ChemoRun) else r for r in self.runs]

    @property
    def reference(self) -> FieldTrajectory:
        return self.trajectories[-1]

    def shifted(self, drop: int = 1) -> SweepResult:
        return SweepResult(
            self.eps[drop:], self.members[drop:], self.runs[drop:], self.tables[drop:],
            self.template, self.gamma, self.degenerate,
        )


def heat_table(traj: FieldTrajectory) -> dict[str, float]:
    table = {"mass_end": integrate(traj.final), "gradient_energy": gradient_energy(traj)}
    for k in (1, 2, 4, 8):
        table[f"truncated_k{k}"] = truncated_gradient_energy(traj, float(k))
    for alpha in (0.5, 1.0, 2.0):
        table[f"weighted_alpha{alpha:g}"] = weighted_gradient_energy(traj, alpha)
    for lam in (1.0, 1.1):
        table[f"grad_lambda{lam:g}"] = grad_lambda_norm(traj, lam)
    return table


def chemo_table(run: ChemoRun) -> dict[str, float]:
    masses = run.series("mass_u")
    log_grad, power = lemma64_functionals(run, 1.5)
    return {
        "mass_u_end": float(masses[-1]),
        "mass_u_drift": float(np.max(np.abs(masses - masses[0]))),
        "min_v": float(np.min(run.series("min_v"))),
        "log_gradient_u": log_grad,
        "u_power_1.5": power,
    }


def _solve_member(member: DataMember, template: SweepTemplate, config: SolverConfig, t_end: float):
    if template.kind == "heat":
        traj = solve_heat(HeatProblem(template.kappa, member.v0, member.f), t_end, config)
        return traj, heat_table(traj)
    if template.system is None:
        raise ValueError("a chemotaxis sweep needs a system template")
    system = replace(template.system, eps=member.eps)
    run = solve_chemo(system, member.v0, ScalarField.constant(member.v0.grid, template.v_init), t_end, config)
    return run, chemo_table(run)


def _is_degenerate(members: Sequence[DataMember]) -> bool:
    first = members[0]
    return all(
        np.array_equal(m.v0.values, first.v0.values) and np.array_equal(m.f.stack(), first.f.stack())
        for m in members[1:]
    )


def run_eps_sweep(
    members: Sequence[DataMember],
    template: SweepTemplate,
    config: SolverConfig,
    t_end: float,
    threads: int = 1,
    errors: Errors | None = None,
    gamma: float | None = None,
) -> SweepResult:
    """Solve every member, in parallel when threads > 1; results stay ordered by eps."""
    if not members:
        raise ValueError("sweep needs at least one member")
    grid = members[0].v0.grid
    if any(m.v0.grid != grid for m in members):
        raise ValueError("all sweep members must share one grid")
    errors = errors if errors is not None else Errors()
    log_lock = threading.Lock()

    def job(member: DataMember):
        try:
            return _solve_member(member, template, config, t_end)
        except Exception as e:
            with log_lock:
                errors.exception(f"Sweep member eps={member.eps:g} failed", e)
            raise

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(job, members))
    degenerate = _is_degenerate(members)
    if degenerate:
        errors.info("Sweep is degenerate: every member carries identical data")
    return SweepResult(
        [m.eps for m in members],
        list(members),
        [r for r, _ in results],
        [t for _, t in results],
        template,
        gamma,
        degenerate,
    )


# ---------------------------------------------------------------------------
# Cauchy ladders
# ---------------------------------------------------------------------------


@dataclass
class ConvergenceReport:
    name: str
    anchor: str
    d: list[float]
    rate: float
    verdict: Verdict
    gamma: float | None = None
    note: str = ""
    extras: dict[str, list[float]] = field(default_factory=dict)

    def to_rows(self) -> list[dict]:
        return [
            {"quantity": self.name, "anchor": self.anchor, "j": j, "d": value, "verdict": self.verdict,
             "rate": self.rate, "gamma": self.gamma}
            for j, value in enumerate(self.d)
        ]


def fit_rate(d: Sequence[float]) -> float:
    """Least-squares slope of log d_j against j over the nonzero rungs."""
    points = [(j, math.log(x)) for j, x in enumerate(d) if x > 0.0]
    if len(points) < 2:
        return 0.0
    js, logs = zip(*points)
    return float(linregress(js, logs).slope)


def verdict(d: Sequence[float]) -> Verdict:
    if len(d) == 0:
        raise ValueError("empty ladder")
    last = len(d) - 1
    if all(x == 0.0 for x in d):
        return "cauchy-decreasing"
    tail = math.ceil(last / 2)
    decreasing = all(d[i] < d[i - 1] for i in range(last - tail + 1, last + 1))
    if decreasing and d[last] <= DECREASE_FACTOR * d[0]:
        return "cauchy-decreasing"
    if d[last] > DIVERGE_FACTOR * d[0]:
        return "diverging"
    return "stagnant"


def _report(name: str, anchor: str, d: list[float], sweep: SweepResult, note: str = "") -> ConvergenceReport:
    notes = ["full built-in sequence; a stagnant verdict does not exclude convergent subsequences"]
    if note:
        notes.insert(0, note)
    return ConvergenceReport(name, anchor, d, fit_rate(d), verdict(d), sweep.gamma, "; ".join(notes))


def cauchy_ladder(
    sweep: SweepResult,
    distance: Callable[[FieldTrajectory, FieldTrajectory], float],
    name: str,
    anchor: str = "",
    min_rungs: int = 2,
) -> ConvergenceReport:
    trajs = sweep.trajectories
    if len(trajs) < min_rungs:
        raise ValueError(f"ladder '{name}' needs at least {min_rungs} rungs, sweep has {len(trajs)}")
    d = [distance(a, b) for a, b in zip(trajs, trajs[1:])]
    return _report(name, anchor, d, sweep)


def _face_l2_distance(a: FieldTrajectory, b: FieldTrajectory, transform) -> float:
    total = 0.0
    for fa, fb in zip(a.frames[1:], b.frames[1:]):
        diff = transform(fa) - transform(fb)
        total += float(sum(np.sum(c * c) for c in diff.components)) * a.grid.face_volume
    return math.sqrt(a.dt * total)


def _check_compatible(a: FieldTrajectory, b: FieldTrajectory):
    if a.grid != b.grid or a.steps != b.steps or not math.isclose(a.dt, b.dt):
        raise ValueError("ladder members must share grid, dt and horizon")


def truncated_gradient_distance(k: float):
    def distance(a: FieldTrajectory, b: FieldTrajectory) -> float:
        _check_compatible(a, b)
        return _face_l2_distance(a, b, lambda f: face_gradient(f.with_values(np.clip(f.values, -k, k))))

    return distance


def cauchy_truncated_gradients(sweep: SweepResult, k: float) -> ConvergenceReport:
    """d_j = ||grad T_k v_j - grad T_k v_{j+1}||_{L2(Q)}."""
    if not k > 0.0:
        raise ValueError(f"truncation level must be positive, got {k}")
    report = cauchy_ladder(sweep, truncated_gradient_distance(k), f"truncated_gradient_k{k:g}",
                           "Theorem 1.1 truncated gradients", min_rungs=4)
    return report


def cauchy_weighted_gradients(sweep: SweepResult, r: float) -> ConvergenceReport:
    """d_j = ||(|v_j|+1)^-r grad v_j - (|v_{j+1}|+1)^-r grad v_{j+1}||_{L2(Q)}."""
    if not r > 0.5:
        raise ValueError(f"r={r} is below the threshold r > 1/2 for weighted gradient convergence")

    def transform(f: ScalarField):
        weight = face_average(f.with_values(np.abs(f.values))).map(lambda a: (a + 1.0) ** -r)
        return face_gradient(f) * weight

    def distance(a, b):
        _check_compatible(a, b)
        return _face_l2_distance(a, b, transform)

    return cauchy_ladder(sweep, distance, f"weighted_gradient_r{r:g}", "Theorem 1.1 weighted gradients")


def cauchy_lambda_gradients(sweep: SweepResult, lam: float) -> ConvergenceReport:
    """d_j = ||grad v_j - grad v_{j+1}||_{L^lambda(Q)}."""
    grid = sweep.reference.grid
    upper = (grid.dim + 2) / (grid.dim + 1)
    if not (1.0 <= lam < upper):
        raise ValueError(f"lambda={lam} outside the admissible interval λ ∈ [1, (n+2)/(n+1)) = [1, {upper:.4g})")

    def distance(a, b):
        _check_compatible(a, b)
        diff = FieldTrajectory(a.grid, a.dt, tuple(fa - fb for fa, fb in zip(a.frames, b.frames)))
        return grad_lambda_norm(diff, lam)

    return cauchy_ladder(sweep, distance, f"grad_lambda{lam:g}", "Theorem 1.1 gradient L^lambda")


def cauchy_c0l1(sweep: SweepResult) -> ConvergenceReport:
    """d_j = max_n ||v_j(t_n) - v_{j+1}(t_n)||_1; requires the data ladder to converge in L1."""
    data = data_l1_ladder(sweep)
    if data.verdict != "cauchy-decreasing":
        raise HypothesisRefusal("initial data do not converge strongly in L1 along this ladder", {"data_l1": data})

    def distance(a, b):
        _check_compatible(a, b)
        return max(integrate(np.abs(fa.values - fb.values), a.grid) for fa, fb in zip(a.frames, b.frames))

    return cauchy_ladder(sweep, distance, "c0l1", "Lemma 3.1 C0(L1)")


def l1_distance(a: FieldTrajectory, b: FieldTrajectory) -> float:
    _check_compatible(a, b)
    return a.dt * sum(
        integrate(np.abs(fa.values - fb.values), a.grid) for fa, fb in zip(a.frames[:-1], b.frames[:-1])
    )


def cauchy_l1(sweep: SweepResult) -> ConvergenceReport:
    """d_j = ||v_j - v_{j+1}||_{L1(Q)}."""
    return cauchy_ladder(sweep, l1_distance, "l1", "Theorem 1.1 L1(Q)")


def data_l1_ladder(sweep: SweepResult, fn: Callable[[np.ndarray], np.ndarray] = lambda x: x) -> ConvergenceReport:
    """||fn(v0_j) - fn(v0_{j+1})||_1 over the member data."""
    grid = sweep.members[0].v0.grid
    values = [fn(m.v0.values) for m in sweep.members]
    d = [integrate(np.abs(a - b), grid) for a, b in zip(values, values[1:])]
    return _report("data_l1", "hypothesis v0_eps -> v0 in L1", d, sweep)


# ---------------------------------------------------------------------------
# psi-weighted gradients
# ---------------------------------------------------------------------------


def _psi_hypothesis_ladders(sweep: SweepResult, psi: PsiSpec) -> dict[str, ConvergenceReport]:
    grid = sweep.members[0].v0.grid
    initial = data_l1_ladder(sweep, psi.psi)
    initial.name, initial.anchor = "psi_v0_l1", "Theorem 1.2 hypothesis psi(v0_eps) -> psi(v0)"
    products = []
    for member, traj in zip(sweep.members, sweep.trajectories):
        products.append([psi.psi_prime(v.values) * f.values for v, f in zip(traj.frames[1:], member.f.frames[1:])])
    dt = sweep.reference.dt
    d = [
        dt * sum(integrate(np.abs(x - y), grid) for x, y in zip(a, b))
        for a, b in zip(products, products[1:])
    ]
    source = _report("psi_prime_f_l1", "Theorem 1.2 hypothesis psi'(v_eps) f_eps -> psi'(v) f", d, sweep)
    return {"psi_v0_l1": initial, "psi_prime_f_l1": source}


def lemma43_bounds(sweep: SweepResult, psi: PsiSpec, phi: PhiFunction) -> list[float]:
    """int int Phi'(psi(v_eps)) psi''(v_eps) |grad v_eps|^2 for every member."""
    return [theta_weighted_energy(traj, phi, psi) for traj in sweep.trajectories]


def cauchy_psi_gradients(
    sweep: SweepResult,
    psi: PsiSpec,
    phi: PhiFunction | None = None,
    errors: Errors | None = None,
) -> ConvergenceReport:
    """Cauchy ladder of (psi''(v))^{1/2} grad v after the psi hypotheses pass on the sweep.

    Raises HypothesisRefusal when a hypothesis ladder is not cauchy-decreasing
    or psi fails its sampled-range checks.
    """
    samples = np.concatenate([traj.stack().ravel() for traj in sweep.trajectories])
    problems = psi.check_range(samples)
    ladders = _psi_hypothesis_ladders(sweep, psi)
    failing = [name for name, report in ladders.items() if report.verdict != "cauchy-decreasing"]
    if problems or failing:
        message = "; ".join(problems + [f"hypothesis ladder '{name}' is {ladders[name].verdict}" for name in failing])
        if errors is not None:
            errors.warning(f"Refusing psi-gradient conclusion: {message}")
        raise HypothesisRefusal(f"psi-gradient conclusion refused: {message}", ladders)

    def transform(f: ScalarField):
        weight = face_average(f).map(lambda s: np.sqrt(np.maximum(psi.psi_second(s), 0.0)))
        return face_gradient(f) * weight

    def distance(a, b):
        _check_compatible(a, b)
        return _face_l2_distance(a, b, transform)

    report = cauchy_ladder(sweep, distance, f"psi_gradient_{psi.family}", "Theorem 1.2 psi gradients")
    report.note = f"psi hypotheses checked on the sampled range only; {report.note}"
    if phi is None:
        grid = sweep.reference.grid
        initial = [m.v0.with_values(psi.psi(m.v0.values)) for m in sweep.members]
        budget = grid.measure + 2.0 * max(integrate(np.abs(f.values), grid) for f in initial)
        phi = build_dlvp_phi([initial], budget)
    report.extras["lemma43_bound"] = lemma43_bounds(sweep, psi, phi)
    report.extras["phi_c"] = [phi.c]
    for name, ladder in ladders.items():
        report.extras[name] = ladder.d
    return report


# ---------------------------------------------------------------------------
# Cross-sequence agreement
# ---------------------------------------------------------------------------


def cross_sequence_agreement(sweep_a: SweepResult, sweep_b: SweepResult) -> float:
    """||finest(A) - finest(B)||_{L1(Q)}."""
    return l1_distance(sweep_a.reference, sweep_b.reference)


def agreement_bound(report_a: ConvergenceReport, report_b: ConvergenceReport) -> float:
    """3 (d_J^A + d_J^B): the expected ceiling for sweeps sharing one limit."""
    return 3.0 * (report_a.d[-1] + report_b.d[-1])
