"""
Batch front end: experiment configuration, execution, the run archive, field
snapshots, CSV reports and plot data.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import pydantic
import scipy
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from simple_error_log.errors import Errors

from chemotaxis import ChemoError, ChemoSystem, DampeningSpec, solve_chemo
from convergence_lab import (
    ConvergenceReport,
    DataFamilySpec,
    HypothesisRefusal,
    SweepTemplate,
    agreement_bound,
    cauchy_c0l1,
    cauchy_l1,
    cauchy_lambda_gradients,
    cauchy_psi_gradients,
    cauchy_truncated_gradients,
    cauchy_weighted_gradients,
    cross_sequence_agreement,
    eps_ladder,
    make_data_family,
    run_eps_sweep,
)
from functionals import (
    LandesParams,
    NotUniformlyIntegrableError,
    PsiSpec,
    build_dlvp_phi,
    verify_landes,
)
from grid_core import FieldTrajectory, Grid, GridError, ScalarField, integrate, make_grid
from heat_solver import HeatProblem, LinearSolveError, SolverConfig, exponential_rescale, solve_heat, steps_for
from verifier import (
    EstimateReport,
    PhiSupersolFamily,
    Tolerance,
    check_dissipation_bounds,
    check_heat_apriori,
    check_ln_supersolution,
    check_mass_budget,
    check_phi_supersolution,
    check_weak_solution_v,
    digest_inputs,
)
from weak_forms import TestFunctionSet

SNAPSHOT_MAGIC = b"GFLX"
SNAPSHOT_VERSION = 1
SOLVER_ERRORS = (LinearSolveError, ChemoError, GridError)


class ConfigError(ValueError):
    def __init__(self, problems: list[tuple[str, str]]):
        self.problems = problems
        lines = [f"{path or '<root>'}: {message}" for path, message in problems]
        super().__init__("invalid configuration:\n  " + "\n  ".join(lines))


# ---------------------------------------------------------------------------
# Configuration schema
# ---------------------------------------------------------------------------


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GridSpec(_Strict):
    dim: Literal[1, 2] = 1
    extents: tuple[float, ...] = (1.0,)
    cells: tuple[int, ...] = (64,)

    @model_validator(mode="after")
    def _consistent(self):
        try:
            make_grid(self.dim, self.extents, self.cells)
        except GridError as e:
            raise ValueError(str(e)) from e
        return self

    def build(self) -> Grid:
        return make_grid(self.dim, self.extents, self.cells)


class FieldSpec(_Strict):
    """constant: value; spike: one-cell spike of `mass`; cosine: value + amplitude prod cos(mode pi x/L);
    gaussian: mass-normalised bump of `width`."""

    kind: Literal["constant", "spike", "cosine", "gaussian"] = "constant"
    value: float = 1.0
    mass: float = 1.0
    amplitude: float = 0.5
    mode: int = Field(default=1, ge=0)
    width: float = Field(default=0.05, gt=0.0)
    center: tuple[float, ...] | None = None

    def build(self, grid: Grid) -> ScalarField:
        center = self.center or (0.5,) * grid.dim
        if self.kind == "constant":
            return ScalarField.constant(grid, self.value)
        if self.kind == "spike":
            values = np.zeros(grid.shape)
            index = tuple(min(int(c * n), n - 1) for c, n in zip(center, grid.cells))
            values[index] = self.mass / grid.cell_volume
            return ScalarField(grid, values)
        mesh = grid.mesh()
        if self.kind == "cosine":
            values = np.ones(grid.shape)
            for x, e in zip(mesh, grid.extents):
                values = values * np.cos(self.mode * math.pi * x / e)
            return ScalarField(grid, self.value + self.amplitude * values)
        r2 = sum((x - c * e) ** 2 for x, c, e in zip(mesh, center, grid.extents))
        values = np.exp(-0.5 * r2 / self.width**2)
        return ScalarField(grid, values * self.mass / integrate(values, grid))


class HeatSpec(_Strict):
    kappa: float = 0.0
    v0: FieldSpec = FieldSpec()
    source: float = 0.0


class DampeningModel(_Strict):
    lam: float = 0.0
    mu: float = Field(default=1.0, gt=0.0)
    beta: float = Field(default=2.0, gt=1.0)


class ChemoSpec(_Strict):
    variant: Literal["A", "B", "C"]
    chi: float = Field(default=1.0, gt=0.0)
    eps: float = Field(default=0.1, gt=0.0, lt=1.0)
    g: DampeningModel | None = None
    u0: FieldSpec = FieldSpec(kind="cosine", value=1.0, amplitude=0.5)
    v0: FieldSpec = FieldSpec(kind="constant", value=1.0)

    @model_validator(mode="after")
    def _system(self):
        self.system()
        return self

    def system(self) -> ChemoSystem:
        g = DampeningSpec(self.g.lam, self.g.mu, self.g.beta) if self.g is not None else None
        return ChemoSystem(self.variant, self.chi, self.eps, g)


class LadderSpec(_Strict):
    family: DataFamilySpec
    levels: int = Field(default=6, ge=3)
    start: int = Field(default=0, ge=0)
    template: Literal["heat", "chemo"] = "heat"
    kappa: float = 0.0
    k_values: tuple[float, ...] = (1.0, 4.0)
    r_values: tuple[float, ...] = (1.0,)
    lambda_values: tuple[float, ...] = (1.0,)
    psi_power: float | None = 2.0
    second_family: DataFamilySpec | None = None

    def eps(self) -> list[float]:
        return eps_ladder(self.start + self.levels + 1, self.start)


class LandesSpec(_Strict):
    k: float = Field(default=1.0, gt=0.0)
    sigma: float = Field(default=4.0, gt=0.0)
    ladder: tuple[float, ...] = (1.0, 4.0, 16.0, 64.0)
    tol: float = Field(default=1e-10, gt=0.0)


class CheckerSpec(_Strict):
    """Checker selection and the calibrated tolerances, one per checker name."""

    enabled: tuple[str, ...] | None = None
    tolerances: dict[str, Tolerance] = {}
    narrow_tests: int = Field(default=4, ge=0)
    lambda_values: tuple[float, ...] = (1.0, 1.1)
    q_values: tuple[float, ...] = (1.0, 1.5)
    landes: LandesSpec = LandesSpec()

    def tolerance(self, name: str) -> Tolerance:
        return self.tolerances.get(name, self.tolerances.get("default", Tolerance()))

    def wants(self, name: str) -> bool:
        return self.enabled is None or name in self.enabled


class ExperimentConfig(_Strict):
    kind: Literal["heat", "chemo", "sweep", "verify", "report"]
    grid: GridSpec = GridSpec()
    solver: SolverConfig | None = None
    t_end: float = Field(default=1.0, gt=0.0)
    heat: HeatSpec | None = None
    chemo: ChemoSpec | None = None
    sweep: LadderSpec | None = None
    checkers: CheckerSpec = CheckerSpec()
    output: str = "gradflux_out"
    archive: str | None = None

    @model_validator(mode="after")
    def _sections(self):
        needs = {"heat": ("heat",), "chemo": ("chemo",), "sweep": ("sweep",)}
        for section in needs.get(self.kind, ()):
            if getattr(self, section) is None:
                raise ValueError(f"kind '{self.kind}' requires a '{section}' section")
        if self.kind == "verify" and self.heat is None and self.chemo is None:
            raise ValueError("kind 'verify' requires a 'heat' or 'chemo' section")
        if self.kind == "report" and not self.archive:
            raise ValueError("kind 'report' requires 'archive' (path of an existing run)")
        if self.kind != "report" and self.solver is None:
            raise ValueError(f"kind '{self.kind}' requires a 'solver' section with dt")
        upper = (self.grid.dim + 2) / (self.grid.dim + 1)
        sources = [("checkers.lambda_values", self.checkers.lambda_values)]
        if self.sweep is not None:
            sources.append(("sweep.lambda_values", self.sweep.lambda_values))
        for path, values in sources:
            for lam in values:
                if not 1.0 <= lam < upper:
                    raise ValueError(
                        f"{path}: {lam} violates λ ∈ [1, (n+2)/(n+1)) = [1, {upper:.4g}) for n = {self.grid.dim}"
                    )
        upper_q = (self.grid.dim + 2) / self.grid.dim
        for q in self.checkers.q_values:
            if not 1.0 <= q < upper_q:
                raise ValueError(f"checkers.q_values: {q} violates q ∈ [1, (n+2)/n) = [1, {upper_q:.4g})")
        if self.sweep is not None and self.sweep.template == "chemo":
            if self.chemo is None:
                raise ValueError("a chemotaxis sweep requires a 'chemo' section")
            if self.sweep.start < 1:
                raise ValueError("sweep.start: chemotaxis sweeps need eps < 1, use start >= 1")
        if self.sweep is not None:
            for r in self.sweep.r_values:
                if not r > 0.5:
                    raise ValueError(f"sweep.r_values: {r} violates r > 1/2")
        return self


def parse_config(text: str) -> ExperimentConfig:
    """Parse YAML or JSON text into a validated ExperimentConfig.

    Raises:
        ConfigError: listing every violation with its dotted path.
    """
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError([("", f"not valid YAML/JSON: {e}")]) from e
    if not isinstance(data, dict):
        raise ConfigError([("", "top level must be a mapping")])
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        problems = [(".".join(str(p) for p in err["loc"]), err["msg"]) for err in e.errors()]
        raise ConfigError(problems) from e


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())


def serialize_config(config: ExperimentConfig) -> str:
    return json.dumps(config.model_dump(mode="json"), sort_keys=True, indent=2)


# ---------------------------------------------------------------------------
# Snapshots
# ---------------------------------------------------------------------------


def write_snapshot(path: str | Path, field_: ScalarField):
    """GFLX: magic, u32 version, u32 dim, u32 cells per axis, f64 extents, f64 values (axis 0 fastest)."""
    grid = field_.grid
    header = struct.pack("<4sII", SNAPSHOT_MAGIC, SNAPSHOT_VERSION, grid.dim)
    header += struct.pack(f"<{grid.dim}I", *grid.cells)
    header += struct.pack(f"<{grid.dim}d", *grid.extents)
    with open(path, "wb") as f:
        f.write(header)
        f.write(field_.flat().astype("<f8").tobytes())


def read_snapshot(path: str | Path) -> ScalarField:
    with open(path, "rb") as f:
        data = f.read()
    magic, version, dim = struct.unpack_from("<4sII", data, 0)
    if magic != SNAPSHOT_MAGIC:
        raise ValueError(f"{path}: not a GFLX snapshot")
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"{path}: unsupported snapshot version {version}")
    offset = struct.calcsize("<4sII")
    cells = struct.unpack_from(f"<{dim}I", data, offset)
    offset += 4 * dim
    extents = struct.unpack_from(f"<{dim}d", data, offset)
    offset += 8 * dim
    grid = make_grid(dim, extents, cells)
    values = np.frombuffer(data, dtype="<f8", count=grid.size, offset=offset)
    return ScalarField(grid, values.astype(np.float64))


# ---------------------------------------------------------------------------
# Archive
# ---------------------------------------------------------------------------


@dataclass
class RunArchive:
    path: Path
    config: ExperimentConfig
    manifest: dict = field(default_factory=dict)
    functionals: list[dict] = field(default_factory=list)
    reports: list[EstimateReport] = field(default_factory=list)
    ladders: list[ConvergenceReport] = field(default_factory=list)
    snapshots: list[str] = field(default_factory=list)

    @property
    def failed(self) -> list[EstimateReport]:
        return [r for r in self.reports if not r.passed]

    def add_series(self, quantity: str, anchor: str, xs, values):
        for x, value in zip(xs, values):
            if value is not None:
                self.functionals.append({"quantity": quantity, "anchor": anchor, "x": float(x), "value": float(value)})

    def add_scalar(self, quantity: str, anchor: str, value: float):
        self.functionals.append({"quantity": quantity, "anchor": anchor, "x": None, "value": float(value)})

    def series(self, quantity: str) -> list[tuple[float, float]]:
        return [(row["x"], row["value"]) for row in self.functionals if row["quantity"] == quantity and row["x"] is not None]


def config_digest(config: ExperimentConfig) -> str:
    return hashlib.sha256(serialize_config(config).encode()).hexdigest()


def _versions() -> dict[str, str]:
    return {"numpy": np.__version__, "scipy": scipy.__version__, "pydantic": pydantic.VERSION}


def _format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value)
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_csv(path: Path, fieldnames: list[str], rows: list[dict]):
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _format_value(row.get(k)) for k in fieldnames})


def _read_csv(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with open(path, "r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


REPORT_FIELDS = ["lemma", "anchor", "lhs", "rhs", "margin", "passed", "tolerance", "digest", "note"]
FUNCTIONAL_FIELDS = ["quantity", "anchor", "x", "value"]
LADDER_FIELDS = ["quantity", "anchor", "j", "d", "verdict", "rate", "gamma"]


def _float(text: str) -> float | None:
    return float(text) if text not in ("", None) else None


def load_archive(path: str | Path) -> RunArchive:
    """Re-read manifest and CSV tables of an existing run directory."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json in '{path}'")
    with open(manifest_path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    config = ExperimentConfig.model_validate(manifest["config"])
    archive = RunArchive(path, config, manifest)
    for row in _read_csv(path / "reports.csv"):
        archive.reports.append(
            EstimateReport(
                row["lemma"], row["anchor"], float(row["lhs"]), float(row["rhs"]), float(row["margin"]),
                row["passed"] == "True", float(row["tolerance"]), row["digest"], row["note"],
            )
        )
    for row in _read_csv(path / "functionals.csv"):
        archive.functionals.append(
            {"quantity": row["quantity"], "anchor": row["anchor"], "x": _float(row["x"]), "value": float(row["value"])}
        )
    ladders: dict[str, ConvergenceReport] = {}
    for row in _read_csv(path / "ladders.csv"):
        name = row["quantity"]
        if name not in ladders:
            ladders[name] = ConvergenceReport(name, row["anchor"], [], float(row["rate"]), row["verdict"],
                                              _float(row["gamma"]))
        ladders[name].d.append(float(row["d"]))
    archive.ladders = list(ladders.values())
    archive.snapshots = sorted(p.name for p in (path / "snapshots").glob("*.gflx")) if (path / "snapshots").exists() else []
    return archive


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


def _heat_problem(config: ExperimentConfig, grid: Grid) -> HeatProblem:
    spec = config.heat
    steps = steps_for(config.t_end, config.solver.dt)
    return HeatProblem.constant(grid, spec.v0.build(grid), spec.source, config.solver.dt, steps, spec.kappa)


def _heat_reports(archive: RunArchive, traj: FieldTrajectory, problem: HeatProblem, full: bool, errors: Errors):
    config = archive.config
    checkers = config.checkers
    grid, dt = traj.grid, traj.dt
    archive.add_series("mass", "Lemma 2.1 int v(t)", traj.times, [integrate(f) for f in traj.frames])
    if checkers.wants("heat_apriori"):
        subject, base = traj, problem
        if problem.kappa != 0.0:
            errors.info(f"Applying the e^(kappa t) rescaling with kappa={problem.kappa} before the a-priori checks")
            subject = exponential_rescale(traj, problem.kappa)
            f = exponential_rescale(problem.f, problem.kappa)
            base = HeatProblem(0.0, problem.v0, f)
        archive.reports.extend(
            check_heat_apriori(subject, base, checkers.tolerance("heat_apriori"), config.solver.theta,
                               checkers.q_values, checkers.lambda_values)
        )
    if checkers.wants("weak"):
        tests = TestFunctionSet.signed(grid, traj.t_end, dt, checkers.narrow_tests)
        archive.reports.append(check_weak_solution_v(traj, tests, problem, checkers.tolerance("weak")))
    if full and checkers.wants("landes"):
        spec = checkers.landes
        landes = verify_landes(traj, LandesParams(spec.k, spec.sigma, problem.v0), spec.tol, spec.ladder)
        digest = digest_inputs(traj.stack(), k=spec.k, sigma=spec.sigma)
        archive.reports.extend(
            [
                EstimateReport("Lemma 3.6 step", "Lemma 3.6 relaxation residual", landes.step_residual, 0.0,
                               -landes.step_residual, landes.step_residual <= spec.tol, spec.tol, digest),
                EstimateReport("Lemma 3.6 initial", "Lemma 3.6 eta(0) = T_k zeta", 0.0, 0.0, 0.0,
                               landes.initial_exact, 0.0, digest, "bit-exact comparison"),
                EstimateReport("Lemma 3.6 bound", "Lemma 3.6 ||eta||_inf <= k", 0.0, 0.0, 0.0,
                               landes.linf_ok, 0.0, digest),
                EstimateReport("Lemma 3.6 sigma ladder", "Lemma 3.6 eta -> T_k v", landes.distances[-1],
                               landes.distances[0], landes.distances[0] - landes.distances[-1],
                               landes.ladder_decreasing, 0.0, digest,
                               "distances " + ", ".join(f"{d:.6g}" for d in landes.distances)),
            ]
        )
        archive.add_series("landes_distance", "Lemma 3.6 sigma ladder", landes.sigmas, landes.distances)
    if full and checkers.wants("dlvp"):
        try:
            phi = build_dlvp_phi([[problem.v0, traj.final]], budget=2.0 * grid.measure + integrate(traj.final))
            knots = phi.check_knots()
            digest = digest_inputs(c=phi.c, c2=phi.young_constant)
            archive.reports.append(
                EstimateReport("Lemma 4.1", "Lemma 4.1 knot invariants", 0.0, 0.0, 0.0, all(knots.values()), 0.0,
                               digest, ", ".join(f"{k}={v}" for k, v in knots.items()))
            )
            archive.add_scalar("phi_c", "Lemma 4.1 c", phi.c)
            archive.add_scalar("young_c2", "Lemma 4.2 c2", phi.young_constant)
        except NotUniformlyIntegrableError as e:
            errors.warning(str(e))


def _chemo_reports(archive: RunArchive, run, errors: Errors):
    checkers = archive.config.checkers
    grid, dt, t_end = run.grid, run.dt, run.t_end
    for name in ("mass_u", "min_u", "max_u", "min_v", "max_v", "quasi_energy", "grad_ln_u", "grad_ln_v", "abs_g"):
        values = [getattr(d, name) for d in run.diagnostics]
        if any(v is not None for v in values):
            archive.add_series(name, "diagnostics per frame", [d.t for d in run.diagnostics], values)
    if checkers.wants("mass_budget"):
        archive.reports.append(check_mass_budget(run, checkers.tolerance("mass_budget")))
    if checkers.wants("dissipation"):
        archive.reports.extend(check_dissipation_bounds(run, checkers.tolerance("dissipation")))
    if checkers.wants("weak"):
        tests = TestFunctionSet.signed(grid, t_end, dt, checkers.narrow_tests)
        archive.reports.append(check_weak_solution_v(run, tests, tolerance=checkers.tolerance("weak")))
    tests = TestFunctionSet.standard(grid, t_end, dt, checkers.narrow_tests)
    if run.system.variant == "A" and checkers.wants("phi_supersolution"):
        u_top = max(u.max() for u in run.u_traj.frames)
        v_top = max(v.max() for v in run.v_traj.frames)
        family = PhiSupersolFamily.standard(u_top, v_top)
        for problem in family.validate():
            errors.warning(problem)
        archive.reports.extend(
            check_phi_supersolution(run, family, tests, checkers.tolerance("phi_supersolution"))
        )
    if run.system.variant in ("B", "C") and checkers.wants("ln_supersolution"):
        archive.reports.append(check_ln_supersolution(run, tests, checkers.tolerance("ln_supersolution")))


def _sweep(archive: RunArchive, grid: Grid, threads: int, errors: Errors):
    config = archive.config
    spec = config.sweep
    solver = config.solver
    eps = spec.eps()
    if spec.template == "chemo":
        template = SweepTemplate("chemo", system=config.chemo.system(), v_init=config.chemo.v0.value)
    else:
        template = SweepTemplate("heat", kappa=spec.kappa)
    members = make_data_family(spec.family, grid, config.t_end, solver.dt, eps)
    sweep = run_eps_sweep(members, template, solver, config.t_end, threads, errors, spec.family.gamma)
    for e, table in zip(sweep.eps, sweep.tables):
        for name, value in table.items():
            archive.functionals.append({"quantity": f"member_{name}", "anchor": "sweep member table",
                                        "x": float(e), "value": float(value)})

    if spec.template == "heat" and config.checkers.wants("heat_apriori") and spec.kappa == 0.0:
        for member, traj in zip(members, sweep.runs):
            for report in check_heat_apriori(traj, HeatProblem(0.0, member.v0, member.f),
                                             config.checkers.tolerance("heat_apriori"), solver.theta,
                                             config.checkers.q_values, config.checkers.lambda_values):
                report.lemma = f"{report.lemma} eps={member.eps:g}"
                archive.reports.append(report)
    if spec.template == "chemo" and config.checkers.wants("mass_budget"):
        for member, run in zip(members, sweep.runs):
            report = check_mass_budget(run, config.checkers.tolerance("mass_budget"))
            report.lemma = f"{report.lemma} eps={member.eps:g}"
            archive.reports.append(report)

    ladders = [cauchy_l1(sweep)]
    try:
        ladders.append(cauchy_c0l1(sweep))
    except HypothesisRefusal as e:
        errors.warning(str(e))
    ladders.extend(cauchy_truncated_gradients(sweep, k) for k in spec.k_values)
    ladders.extend(cauchy_weighted_gradients(sweep, r) for r in spec.r_values)
    ladders.extend(cauchy_lambda_gradients(sweep, lam) for lam in spec.lambda_values)
    if spec.psi_power is not None and spec.template == "heat":
        try:
            ladders.append(cauchy_psi_gradients(sweep, PsiSpec.power(spec.psi_power), errors=errors))
        except HypothesisRefusal as e:
            ladders.extend(e.ladders.values())
            archive.reports.append(
                EstimateReport("Theorem 1.2 hypotheses", "Theorem 1.2 psi hypotheses", 0.0, 0.0, 0.0, False, 0.0,
                               digest_inputs(psi=spec.psi_power), f"refused: {e}")
            )
        except NotUniformlyIntegrableError as e:
            errors.warning(str(e))
    archive.ladders.extend(ladders)

    if spec.second_family is not None:
        other_members = make_data_family(spec.second_family, grid, config.t_end, solver.dt, eps)
        other = run_eps_sweep(other_members, template, solver, config.t_end, threads, errors, spec.second_family.gamma)
        agreement = cross_sequence_agreement(sweep, other)
        bound = agreement_bound(cauchy_l1(sweep), cauchy_l1(other))
        archive.reports.append(
            EstimateReport("Lemma 3.4 cross-sequence", "Lemma 3.4 finest(A) vs finest(B)", agreement, bound,
                           bound - agreement, agreement <= bound, 0.0,
                           digest_inputs(sweep.reference.stack(), other.reference.stack()),
                           "empirical uniqueness surrogate")
        )
    return sweep


def run_experiment(
    config: ExperimentConfig,
    out_dir: str | Path | None = None,
    threads: int = 1,
    errors: Errors | None = None,
) -> RunArchive:
    """Run the configured experiment and write its archive.

    Solver failures propagate (LinearSolveError, ChemoError); checker failures
    are recorded as reports.
    """
    errors = errors if errors is not None else Errors()
    if config.kind == "report":
        archive = load_archive(config.archive)
        emit_reports(archive, errors)
        return archive

    path = Path(out_dir or config.output)
    (path / "snapshots").mkdir(parents=True, exist_ok=True)
    archive = RunArchive(path, config)
    grid = config.grid.build()
    started = time.perf_counter()
    try:
        if config.kind == "sweep":
            sweep = _sweep(archive, grid, threads, errors)
            for j, member in enumerate(sweep.members):
                name = f"member{j:02d}_v0.gflx"
                write_snapshot(path / "snapshots" / name, member.v0)
                archive.snapshots.append(name)
        elif config.kind == "chemo" or (config.kind == "verify" and config.chemo is not None):
            spec = config.chemo
            run = solve_chemo(spec.system(), spec.u0.build(grid), spec.v0.build(grid), config.t_end, config.solver)
            _chemo_reports(archive, run, errors)
            for name, fld in (("u0", run.u_traj.frames[0]), ("v0", run.v_traj.frames[0]),
                              ("u_final", run.u_traj.final), ("v_final", run.v_traj.final)):
                write_snapshot(path / "snapshots" / f"{name}.gflx", fld)
                archive.snapshots.append(f"{name}.gflx")
        else:
            problem = _heat_problem(config, grid)
            traj = solve_heat(problem, config.t_end, config.solver)
            _heat_reports(archive, traj, problem, config.kind == "verify", errors)
            for name, fld in (("v0", traj.frames[0]), ("v_final", traj.final)):
                write_snapshot(path / "snapshots" / f"{name}.gflx", fld)
                archive.snapshots.append(f"{name}.gflx")
    except SOLVER_ERRORS as e:
        errors.exception(f"Solver failure in '{config.kind}' experiment", e)
        raise
    elapsed = time.perf_counter() - started

    archive.manifest = {
        "kind": config.kind,
        "config": config.model_dump(mode="json"),
        "config_digest": config_digest(config),
        "versions": _versions(),
        "timings": {"solve_and_check_seconds": elapsed},
    }
    with open(path / "manifest.json", "w", encoding="utf-8") as f:
        f.write(json.dumps(archive.manifest, indent=2, sort_keys=True, default=str))
    emit_reports(archive, errors)
    return archive


# ---------------------------------------------------------------------------
# Emitters
# ---------------------------------------------------------------------------


def emit_reports(archive: RunArchive, errors: Errors | None = None) -> list[Path]:
    """Write reports.csv, functionals.csv, ladders.csv, summary.txt and every plot file."""
    errors = errors if errors is not None else Errors()
    path = archive.path
    written = []
    try:
        path.mkdir(parents=True, exist_ok=True)
        _write_csv(path / "reports.csv", REPORT_FIELDS, [r.to_row() for r in archive.reports])
        _write_csv(path / "functionals.csv", FUNCTIONAL_FIELDS, archive.functionals)
        _write_csv(path / "ladders.csv", LADDER_FIELDS, [row for ladder in archive.ladders for row in ladder.to_rows()])
        written += [path / "reports.csv", path / "functionals.csv", path / "ladders.csv"]
        with open(path / "summary.txt", "w", encoding="utf-8") as f:
            f.write(format_summary_text(archive, errors))
        written.append(path / "summary.txt")
        quantities = sorted({row["quantity"] for row in archive.functionals if row["x"] is not None})
        quantities += [ladder.name for ladder in archive.ladders]
        for quantity in quantities:
            written.append(emit_plot_data(archive, quantity))
    except OSError as e:
        errors.exception(f"Failed writing archive files under '{path}'", e)
        raise
    return written


def emit_plot_data(archive: RunArchive, quantity: str) -> Path:
    """Whitespace-separated (x, value) columns, '#' header lines naming the anchor."""
    ladder = next((item for item in archive.ladders if item.name == quantity), None)
    if ladder is not None:
        anchor, columns = ladder.anchor, "j d_j"
        rows = list(enumerate(ladder.d))
    else:
        rows = archive.series(quantity)
        if not rows:
            raise KeyError(f"no plottable quantity '{quantity}' in archive")
        anchor = next(r["anchor"] for r in archive.functionals if r["quantity"] == quantity)
        columns = "x value"
    target = archive.path / f"plot_{quantity}.dat"
    with open(target, "w", encoding="utf-8") as f:
        f.write(f"# quantity: {quantity}\n# anchor: {anchor}\n# columns: {columns}\n")
        for x, value in rows:
            f.write(f"{_format_value(float(x))} {_format_value(float(value))}\n")
    return target


def format_summary_text(archive: RunArchive, errors: Errors | None = None) -> str:
    manifest = archive.manifest
    output = []
    output.append("=" * 60)
    output.append("gradflux Run Summary")
    output.append("=" * 60)
    output.append(f"Archive: {archive.path}")
    output.append(f"Experiment: {archive.config.kind}")
    output.append(f"Config digest: {manifest.get('config_digest', config_digest(archive.config))}")
    passed = sum(1 for r in archive.reports if r.passed)
    output.append(f"Reports: {len(archive.reports)} ({passed} passed, {len(archive.reports) - passed} failed)")
    output.append("")
    if archive.reports:
        output.append("Estimates")
        output.append("-" * 60)
        for r in archive.reports:
            status = "PASS" if r.passed else "FAIL"
            output.append(
                f"[{status}] {r.lemma}: lhs={r.lhs:.6g} rhs={r.rhs:.6g} margin={r.margin:.3e} "
                f"tol={r.tolerance:.1e} ({r.anchor})"
            )
            if r.note:
                output.append(f"       {r.note}")
        output.append("")
    if archive.ladders:
        output.append("Cauchy ladders")
        output.append("-" * 60)
        for ladder in archive.ladders:
            final = ladder.d[-1] if ladder.d else float("nan")
            output.append(
                f"{ladder.name}: {ladder.verdict} rate={ladder.rate:.3f} d_0={ladder.d[0] if ladder.d else float('nan'):.3e} "
                f"d_J={final:.3e} ({ladder.anchor})"
            )
        output.append("Verdict policy: last ceil(J/2) rungs decreasing and d_J <= 0.2 d_0")
        output.append("")
    if errors is not None and errors.error_count() > 0:
        output.append(f"Errors: {errors.dump(0)}")
        output.append("")
    output.append("=" * 60)
    return "\n".join(output) + "\n"


def format_summary_json(archive: RunArchive) -> str:
    output_data = {
        "archive": str(archive.path),
        "kind": archive.config.kind,
        "config_digest": archive.manifest.get("config_digest", config_digest(archive.config)),
        "reports": [r.to_row() for r in archive.reports],
        "ladders": [asdict(ladder) for ladder in archive.ladders],
        "snapshots": archive.snapshots,
    }
    return json.dumps(output_data, indent=2, default=str)


def default_output_dir() -> str | None:
    return os.environ.get("GRADFLUX_OUT")


def retarget(config: ExperimentConfig, kind: str) -> ExperimentConfig:
    """The same configuration run as another experiment kind, revalidated."""
    if config.kind == kind:
        return config
    data = config.model_dump(mode="json")
    data["kind"] = kind
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError([(".".join(str(p) for p in err["loc"]), err["msg"]) for err in e.errors()]) from e
