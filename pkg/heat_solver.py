"""
Heat solver

Implicit theta-scheme for z_t = Laplace(z) - kappa z + f with homogeneous
Neumann data on the grid_core meshes. The shifted Neumann solve is shared with
the chemotaxis steppers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
import scipy.sparse as sp
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field
from scipy.linalg import solve_banded
from scipy.sparse.linalg import cg

from grid_core import FieldTrajectory, Grid, GridError, ScalarField, face_gradient, laplacian_neumann
from weak_forms import TestFunctionSet, paired_cells, paired_faces_grad, time_term


class LinearSolveError(RuntimeError):
    def __init__(self, message: str, residual: float, iterations: int, tolerance: float):
        super().__init__(f"{message} (relative residual {residual:.3e} after {iterations} iterations, tolerance {tolerance:.1e})")
        self.residual = residual
        self.iterations = iterations
        self.tolerance = tolerance


class SolverConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    dt: float = Field(gt=0.0)
    theta: float = Field(default=1.0, ge=0.5, le=1.0)
    linear_tol: float = Field(default=1e-10, gt=0.0)
    max_iter: int = Field(default=10_000, gt=0)


@dataclass(frozen=True, eq=False)
class HeatProblem:
    kappa: float
    v0: ScalarField
    f: FieldTrajectory

    def __post_init__(self):
        if self.v0.grid != self.f.grid:
            raise GridError("initial datum and source must share one grid")

    @classmethod
    def constant(cls, grid: Grid, v0: float | ScalarField, f_value: float, dt: float, steps: int, kappa: float = 0.0):
        start = v0 if isinstance(v0, ScalarField) else ScalarField.constant(grid, v0)
        source = ScalarField.constant(grid, f_value)
        return cls(kappa, start, FieldTrajectory(grid, dt, (source,) * (steps + 1)))

    @property
    def grid(self) -> Grid:
        return self.v0.grid


def source_from_function(grid: Grid, fn: Callable[..., NDArray], dt: float, steps: int) -> FieldTrajectory:
    """Sample f(x, [y,] t) at the frame times."""
    mesh = grid.mesh()
    frames = tuple(
        ScalarField(grid, np.broadcast_to(fn(*mesh, n * dt), grid.shape)) for n in range(steps + 1)
    )
    return FieldTrajectory(grid, dt, frames)


@lru_cache(maxsize=32)
def neumann_laplacian_matrix(grid: Grid) -> sp.csr_matrix:
    """Sparse mirror-ghost Laplacian acting on Fortran-ordered cell vectors."""
    blocks = []
    for axis in range(grid.dim):
        n = grid.cells[axis]
        h2 = grid.spacing[axis] ** 2
        main = np.full(n, -2.0 / h2)
        main[0] = main[-1] = -1.0 / h2
        off = np.full(n - 1, 1.0 / h2)
        blocks.append(sp.diags([off, main, off], [-1, 0, 1], format="csr"))
    if grid.dim == 1:
        return blocks[0]
    ix = sp.identity(grid.cells[0], format="csr")
    iy = sp.identity(grid.cells[1], format="csr")
    return (sp.kron(iy, blocks[0]) + sp.kron(blocks[1], ix)).tocsr()


def solve_shifted(
    grid: Grid,
    shift: float | NDArray,
    rhs: NDArray,
    config: SolverConfig,
    diffusivity: float = 1.0,
    guess: NDArray | None = None,
) -> NDArray:
    """Solve (diag(shift) - diffusivity * Laplace_h) x = rhs for cell arrays.

    1D uses a banded direct solve, 2D conjugate gradients with a Jacobi preconditioner.
    `shift` must be positive in every cell.
    """
    shape = grid.shape
    b = np.asarray(rhs, dtype=np.float64).ravel(order="F")
    shift_vec = np.broadcast_to(np.asarray(shift, dtype=np.float64), shape).ravel(order="F")
    if grid.dim == 1:
        n = grid.cells[0]
        h2 = grid.spacing[0] ** 2
        ab = np.zeros((3, n))
        ab[0, 1:] = -diffusivity / h2
        ab[2, :-1] = -diffusivity / h2
        ab[1, :] = shift_vec + 2.0 * diffusivity / h2
        ab[1, 0] = shift_vec[0] + diffusivity / h2
        ab[1, -1] = shift_vec[-1] + diffusivity / h2
        x = solve_banded((1, 1), ab, b)
        return x.reshape(shape, order="F")

    matrix = (sp.diags(shift_vec) - diffusivity * neumann_laplacian_matrix(grid)).tocsr()
    jacobi = sp.diags(1.0 / matrix.diagonal())
    x0 = None if guess is None else np.asarray(guess, dtype=np.float64).ravel(order="F")
    iterations = 0

    def count(_):
        nonlocal iterations
        iterations += 1

    x, info = cg(
        matrix, b, x0=x0, rtol=config.linear_tol, atol=0.0, maxiter=config.max_iter, M=jacobi, callback=count
    )
    b_norm = float(np.linalg.norm(b))
    residual = float(np.linalg.norm(matrix @ x - b)) / b_norm if b_norm > 0.0 else float(np.linalg.norm(matrix @ x))
    if info != 0:
        raise LinearSolveError("conjugate gradients did not converge", residual, iterations, config.linear_tol)
    return x.reshape(shape, order="F")


def step_theta(
    current: ScalarField,
    f_now: ScalarField,
    f_next: ScalarField,
    kappa: float,
    config: SolverConfig,
) -> ScalarField:
    """One theta-step of z_t = Laplace(z) - kappa z + f.

    Solves (I/dt - theta(Lap - kappa)) z1 = z0/dt + (1-theta)(Lap - kappa) z0
    + theta f_next + (1-theta) f_now.
    """
    grid = current.grid
    if f_now.grid != grid or f_next.grid != grid:
        raise GridError("state and source must share one grid")
    dt, theta = config.dt, config.theta
    shift = 1.0 / dt + theta * kappa
    if shift <= 0.0:
        raise ValueError(f"kappa={kappa} < 0 needs dt < 1/(theta*|kappa|) = {1.0 / (theta * abs(kappa)):.6g}")
    rhs = current.values / dt + theta * f_next.values + (1.0 - theta) * f_now.values
    if theta < 1.0:
        rhs = rhs + (1.0 - theta) * (laplacian_neumann(current).values - kappa * current.values)
    values = solve_shifted(grid, shift, rhs, config, diffusivity=theta, guess=current.values)
    return ScalarField(grid, values)


def steps_for(t_end: float, dt: float) -> int:
    return max(1, math.ceil(t_end / dt - 1e-9))


def solve_heat(problem: HeatProblem, t_end: float, config: SolverConfig) -> FieldTrajectory:
    if not t_end > 0.0:
        raise ValueError(f"horizon must be positive, got {t_end}")
    steps = steps_for(t_end, config.dt)
    if not math.isclose(problem.f.dt, config.dt, rel_tol=1e-12):
        raise ValueError(f"source sampled at dt={problem.f.dt}, solver uses dt={config.dt}")
    if len(problem.f.frames) < steps + 1:
        raise ValueError(f"source covers {problem.f.steps} steps, horizon needs {steps}")
    frames = [problem.v0]
    for n in range(steps):
        frames.append(step_theta(frames[-1], problem.f.frames[n], problem.f.frames[n + 1], problem.kappa, config))
    return FieldTrajectory(problem.grid, config.dt, tuple(frames))


def weak_residual(traj: FieldTrajectory, problem: HeatProblem, tests: TestFunctionSet) -> list[float]:
    """Residual LHS - RHS of the weak heat equation for every test function.

    LHS = -int int v phi_t - int v0 phi(., 0)
    RHS = -int int grad v . grad phi - kappa int int v phi + int int f phi
    """
    grid, dt, steps = traj.grid, traj.dt, traj.steps
    grads = [face_gradient(frame) for frame in traj.frames]
    residuals = []
    for test in tests:
        lhs = time_term(traj, test, initial=problem.v0.values)
        rhs = -paired_faces_grad(grid, dt, steps, test, lambda n: grads[n + 1])
        rhs -= problem.kappa * paired_cells(grid, dt, steps, test, lambda n: traj.frames[n + 1].values)
        rhs += paired_cells(grid, dt, steps, test, lambda n: problem.f.frames[n + 1].values)
        residuals.append(lhs - rhs)
    return residuals


def exponential_rescale(traj: FieldTrajectory, kappa: float) -> FieldTrajectory:
    """(x, t) -> e^{kappa t} v(x, t)."""
    frames = tuple(f * math.exp(kappa * t) for f, t in zip(traj.frames, traj.times))
    return FieldTrajectory(traj.grid, traj.dt, frames)
