"""
Grid core

Cell-centered finite volume meshes on boxes (0, L1) x ... x (0, Ld), d in {1, 2},
with the Neumann mirror-ghost rule, plus the discrete calculus and quadrature
every other module is built on.

Cells are stored as numpy arrays of shape `grid.cells` (axis 0 = x). Flattened
vectors use Fortran order so that axis 0 runs fastest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.typing import NDArray

MIN_CELLS = 4


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    dim: int
    extents: tuple[float, ...]
    cells: tuple[int, ...]

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(e / n for e, n in zip(self.extents, self.cells))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.cells

    @property
    def size(self) -> int:
        return math.prod(self.cells)

    @property
    def cell_volume(self) -> float:
        return math.prod(self.spacing)

    @property
    def face_volume(self) -> float:
        # Dual volume attached to an interior face; equal to the cell volume on
        # a uniform mesh, which keeps the discrete Green identity exact.
        return self.cell_volume

    @property
    def measure(self) -> float:
        return math.prod(self.extents)

    @property
    def min_spacing(self) -> float:
        return min(self.spacing)

    def centers(self, axis: int) -> NDArray[np.float64]:
        h = self.spacing[axis]
        return (np.arange(self.cells[axis]) + 0.5) * h

    def face_centers(self, axis: int) -> NDArray[np.float64]:
        h = self.spacing[axis]
        return np.arange(1, self.cells[axis]) * h

    def mesh(self) -> tuple[NDArray[np.float64], ...]:
        return tuple(np.meshgrid(*[self.centers(a) for a in range(self.dim)], indexing="ij"))

    def face_mesh(self, axis: int) -> tuple[NDArray[np.float64], ...]:
        coords = [self.centers(a) for a in range(self.dim)]
        coords[axis] = self.face_centers(axis)
        return tuple(np.meshgrid(*coords, indexing="ij"))

    def face_shape(self, axis: int) -> tuple[int, ...]:
        shape = list(self.cells)
        shape[axis] -= 1
        return tuple(shape)


def make_grid(dim: int, extents: Sequence[float], cells: Sequence[int]) -> Grid:
    """Build a validated uniform grid.

    Args:
        dim: Spatial dimension, 1 or 2.
        extents: Box side lengths, one per axis.
        cells: Cell counts, one per axis, each at least 4.

    Returns:
        The grid with derived spacing.

    Raises:
        GridError: On a bad dimension, non-positive extent or fewer than 4 cells.
    """
    if dim not in (1, 2):
        raise GridError(f"dimension must be 1 or 2, got {dim}")
    if len(extents) != dim or len(cells) != dim:
        raise GridError(f"expected {dim} extents and cell counts, got {len(extents)} and {len(cells)}")
    extents_t = tuple(float(e) for e in extents)
    cells_t = tuple(int(n) for n in cells)
    for axis, (e, n) in enumerate(zip(extents_t, cells_t)):
        if not (e > 0.0 and math.isfinite(e)):
            raise GridError(f"extent on axis {axis} must be positive, got {e}")
        if n < MIN_CELLS:
            raise GridError(f"cell count on axis {axis} must be at least {MIN_CELLS}, got {n}")
    return Grid(dim, extents_t, cells_t)


@dataclass(frozen=True, eq=False)
class ScalarField:
    grid: Grid
    values: NDArray[np.float64] = field(repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != self.grid.shape:
            if values.size == self.grid.size and values.ndim == 1:
                values = values.reshape(self.grid.shape, order="F")
            else:
                raise GridError(f"field shape {values.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(values)):
            raise GridError("field contains non-finite values")
        values = values.copy()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, grid: Grid, value: float) -> ScalarField:
        return cls(grid, np.full(grid.shape, float(value)))

    @classmethod
    def from_function(cls, grid: Grid, fn: Callable[..., NDArray]) -> ScalarField:
        return cls(grid, np.broadcast_to(fn(*grid.mesh()), grid.shape))

    def flat(self) -> NDArray[np.float64]:
        return self.values.ravel(order="F")

    def reflect(self, axis: int = 0) -> ScalarField:
        return ScalarField(self.grid, np.flip(self.values, axis=axis))

    def with_values(self, values: NDArray) -> ScalarField:
        return ScalarField(self.grid, values)

    def __add__(self, other: ScalarField) -> ScalarField:
        return ScalarField(self.grid, self.values + _values(other))

    def __sub__(self, other: ScalarField) -> ScalarField:
        return ScalarField(self.grid, self.values - _values(other))

    def __mul__(self, scalar: float) -> ScalarField:
        return ScalarField(self.grid, self.values * scalar)

    __rmul__ = __mul__

    def min(self) -> float:
        return float(self.values.min())

    def max(self) -> float:
        return float(self.values.max())


def _values(item) -> NDArray[np.float64]:
    return item.values if isinstance(item, ScalarField) else np.asarray(item, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class FaceField:
    grid: Grid
    components: tuple[NDArray[np.float64], ...] = field(repr=False)

    def __post_init__(self):
        if len(self.components) != self.grid.dim:
            raise GridError(f"expected {self.grid.dim} face components, got {len(self.components)}")
        for axis, comp in enumerate(self.components):
            if comp.shape != self.grid.face_shape(axis):
                raise GridError(f"face component {axis} has shape {comp.shape}, expected {self.grid.face_shape(axis)}")

    def map(self, fn: Callable[[NDArray], NDArray]) -> FaceField:
        return FaceField(self.grid, tuple(fn(c) for c in self.components))

    def combine(self, other: FaceField, fn: Callable[[NDArray, NDArray], NDArray]) -> FaceField:
        return FaceField(self.grid, tuple(fn(a, b) for a, b in zip(self.components, other.components)))

    def squared(self) -> FaceField:
        return self.map(np.square)

    def __mul__(self, other) -> FaceField:
        if isinstance(other, FaceField):
            return self.combine(other, np.multiply)
        return self.map(lambda c: c * other)

    __rmul__ = __mul__

    def __sub__(self, other: FaceField) -> FaceField:
        return self.combine(other, np.subtract)

    def __add__(self, other: FaceField) -> FaceField:
        return self.combine(other, np.add)


@dataclass(frozen=True, eq=False)
class FieldTrajectory:
    grid: Grid
    dt: float
    frames: tuple[ScalarField, ...]

    def __post_init__(self):
        if not self.dt > 0.0:
            raise GridError(f"trajectory time step must be positive, got {self.dt}")
        if len(self.frames) == 0:
            raise GridError("trajectory needs at least one frame")
        object.__setattr__(self, "frames", tuple(self.frames))
        for frame in self.frames:
            if frame.grid != self.grid:
                raise GridError("all frames of a trajectory must share one grid")

    @property
    def steps(self) -> int:
        return len(self.frames) - 1

    @property
    def t_end(self) -> float:
        return self.steps * self.dt

    @property
    def times(self) -> NDArray[np.float64]:
        return np.arange(len(self.frames)) * self.dt

    @property
    def final(self) -> ScalarField:
        return self.frames[-1]

    def map(self, fn: Callable[[ScalarField], ScalarField]) -> FieldTrajectory:
        return FieldTrajectory(self.grid, self.dt, tuple(fn(f) for f in self.frames))

    def stack(self) -> NDArray[np.float64]:
        return np.stack([f.values for f in self.frames])


def face_gradient(field: ScalarField) -> FaceField:
    grid = field.grid
    return FaceField(
        grid, tuple(np.diff(field.values, axis=a) / grid.spacing[a] for a in range(grid.dim))
    )


def divergence(faces: FaceField) -> ScalarField:
    """Discrete divergence of a face field with zero flux through the boundary."""
    grid = faces.grid
    total = np.zeros(grid.shape)
    for axis, comp in enumerate(faces.components):
        pad = [(0, 0)] * grid.dim
        pad[axis] = (1, 1)
        flux = np.pad(comp, pad)
        total += np.diff(flux, axis=axis) / grid.spacing[axis]
    return ScalarField(grid, total)


def laplacian_neumann(field: ScalarField) -> ScalarField:
    return divergence(face_gradient(field))


def face_average(field: ScalarField) -> FaceField:
    grid = field.grid
    comps = []
    for axis in range(grid.dim):
        lo = np.take(field.values, range(0, grid.cells[axis] - 1), axis=axis)
        hi = np.take(field.values, range(1, grid.cells[axis]), axis=axis)
        comps.append(0.5 * (lo + hi))
    return FaceField(grid, tuple(comps))


def face_pairs(field: ScalarField) -> tuple[tuple[NDArray, NDArray], ...]:
    """Left and right cell values adjacent to every interior face, per axis."""
    grid = field.grid
    return tuple(
        (
            np.take(field.values, range(0, grid.cells[a] - 1), axis=a),
            np.take(field.values, range(1, grid.cells[a]), axis=a),
        )
        for a in range(grid.dim)
    )


def integrate(field: ScalarField | NDArray, grid: Grid | None = None) -> float:
    if isinstance(field, ScalarField):
        return float(np.sum(field.values) * field.grid.cell_volume)
    return float(np.sum(field) * grid.cell_volume)


def lp_norm(field: ScalarField, p: float) -> float:
    if p < 1.0:
        raise GridError(f"p must be in [1, inf), got {p}")
    return integrate(np.abs(field.values) ** p, field.grid) ** (1.0 / p)


def linf_norm(field: ScalarField) -> float:
    return float(np.max(np.abs(field.values)))


def face_integral(faces: FaceField) -> float:
    return float(sum(np.sum(c) for c in faces.components) * faces.grid.face_volume)


def _frame_range(traj: FieldTrajectory, rule: str) -> range:
    if rule == "left":
        return range(0, max(traj.steps, 1))
    if rule == "right":
        return range(1, traj.steps + 1)
    raise GridError(f"unknown quadrature rule '{rule}'")


def spacetime_integral(
    traj: FieldTrajectory,
    integrand: Callable[[ScalarField, float], ScalarField | NDArray | float],
    rule: str = "left",
) -> float:
    """Space-time quadrature: midpoint in space, endpoint rule in time.

    The left rule sums frames 0..M-1, the right rule frames 1..M. A trajectory
    with a single frame contributes that frame once with weight dt.
    """
    times = traj.times
    total = 0.0
    for n in _frame_range(traj, rule):
        value = integrand(traj.frames[n], float(times[n]))
        if isinstance(value, ScalarField):
            total += integrate(value)
        elif np.ndim(value) == 0:
            total += float(value) * traj.grid.measure
        else:
            total += integrate(np.asarray(value), traj.grid)
    return traj.dt * total


def face_spacetime_integral(
    traj: FieldTrajectory,
    integrand: Callable[[ScalarField, float], FaceField],
    rule: str = "left",
) -> float:
    times = traj.times
    total = 0.0
    for n in _frame_range(traj, rule):
        total += face_integral(integrand(traj.frames[n], float(times[n])))
    return traj.dt * total
