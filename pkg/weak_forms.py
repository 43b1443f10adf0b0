"""
Analytic space-time test functions and the discrete weak-form quadrature.

A test function is a tensor product phi(x, t) = S(x) * tau(t) of a polynomial
or cosine space profile and a C2 time bump. Weak forms pair the end state of
every step (frame n+1) with the test function at the start of the step (t_n)
and take test gradients as face differences of the cell samples; under this
pairing the theta = 1 steppers satisfy their weak form to rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.typing import NDArray

from grid_core import FaceField, FieldTrajectory, Grid, integrate


# ---------------------------------------------------------------------------
# One-dimensional profiles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Profile1D:
    """A one-dimensional factor with its derivative."""

    kind: str
    a: float = 0.0
    b: float = 1.0
    mode: int = 0

    def value(self, x: NDArray) -> NDArray:
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "one":
            return np.ones_like(x)
        if self.kind == "ramp":
            return x / self.b
        if self.kind == "cos":
            return np.cos(self.mode * math.pi * x / self.b)
        if self.kind == "bump":
            r = 0.5 * (self.b - self.a)
            q = (x - self.a) * (self.b - x) / (r * r)
            return np.where((x > self.a) & (x < self.b), q**3, 0.0)
        raise ValueError(f"unknown profile kind '{self.kind}'")

    def derivative(self, x: NDArray) -> NDArray:
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "one":
            return np.zeros_like(x)
        if self.kind == "ramp":
            return np.full_like(x, 1.0 / self.b)
        if self.kind == "cos":
            k = self.mode * math.pi / self.b
            return -k * np.sin(k * x)
        if self.kind == "bump":
            r = 0.5 * (self.b - self.a)
            q = (x - self.a) * (self.b - x) / (r * r)
            dq = (self.a + self.b - 2.0 * x) / (r * r)
            return np.where((x > self.a) & (x < self.b), 3.0 * q * q * dq, 0.0)
        raise ValueError(f"unknown profile kind '{self.kind}'")

    def sup(self) -> float:
        # every kind is normalised to peak value one on its interval
        return 1.0

    def sup_derivative(self) -> float:
        if self.kind == "one":
            return 0.0
        if self.kind == "ramp":
            return 1.0 / self.b
        if self.kind == "cos":
            return self.mode * math.pi / self.b
        # max of |3 q^2 q'| on the bump; q' = -2 s / r, q = 1 - s^2 with s in [0, 1]
        r = 0.5 * (self.b - self.a)
        s = 1.0 / math.sqrt(5.0)
        return 6.0 * s * (1.0 - s * s) ** 2 / r


@dataclass(frozen=True)
class TimeFactor:
    """C2 time bump: 'start' is (1 - t/t1)^3 on [0, t1], 'window' a cubed
    quadratic on [t0, t1], 'static' is identically one."""

    kind: str
    t0: float = 0.0
    t1: float = math.inf

    def value(self, t: float) -> float:
        if self.kind == "static":
            return 1.0
        if self.kind == "start":
            return (1.0 - t / self.t1) ** 3 if 0.0 <= t < self.t1 else 0.0
        if self.kind == "window":
            if not (self.t0 < t < self.t1):
                return 0.0
            r = 0.5 * (self.t1 - self.t0)
            return ((t - self.t0) * (self.t1 - t) / (r * r)) ** 3
        raise ValueError(f"unknown time factor '{self.kind}'")

    def derivative(self, t: float) -> float:
        if self.kind == "static":
            return 0.0
        if self.kind == "start":
            return -3.0 * (1.0 - t / self.t1) ** 2 / self.t1 if 0.0 <= t < self.t1 else 0.0
        if self.kind == "window":
            if not (self.t0 < t < self.t1):
                return 0.0
            r2 = (0.5 * (self.t1 - self.t0)) ** 2
            q = (t - self.t0) * (self.t1 - t) / r2
            dq = (self.t0 + self.t1 - 2.0 * t) / r2
            return 3.0 * q * q * dq
        raise ValueError(f"unknown time factor '{self.kind}'")

    @property
    def support_end(self) -> float:
        return self.t1


# ---------------------------------------------------------------------------
# Test functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TestFunction:
    profiles: tuple[Profile1D, ...]
    time: TimeFactor
    nonnegative: bool
    label: str
    amplitude: float = 1.0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    __test__ = False

    def _space(self, coords: Sequence[NDArray]) -> NDArray:
        out = self.amplitude * np.ones_like(coords[0])
        for prof, x in zip(self.profiles, coords):
            out = out * prof.value(x)
        return out

    def _space_grad(self, axis: int, coords: Sequence[NDArray]) -> NDArray:
        out = self.amplitude * np.ones_like(coords[0])
        for a, (prof, x) in enumerate(zip(self.profiles, coords)):
            out = out * (prof.derivative(x) if a == axis else prof.value(x))
        return out

    def space_cells(self, grid: Grid) -> NDArray:
        key = ("cells", grid)
        if key not in self._cache:
            self._cache[key] = self._space(grid.mesh())
        return self._cache[key]

    def space_faces(self, grid: Grid) -> tuple[NDArray, ...]:
        key = ("faces", grid)
        if key not in self._cache:
            self._cache[key] = tuple(self._space(grid.face_mesh(a)) for a in range(grid.dim))
        return self._cache[key]

    def space_gradient(self, grid: Grid) -> tuple[NDArray, ...]:
        key = ("grad", grid)
        if key not in self._cache:
            self._cache[key] = tuple(self._space_grad(a, grid.face_mesh(a)) for a in range(grid.dim))
        return self._cache[key]

    def discrete_gradient(self, grid: Grid) -> tuple[NDArray, ...]:
        """Face differences of the cell samples; O(h^2) away from space_gradient."""
        key = ("dgrad", grid)
        if key not in self._cache:
            cells = self.space_cells(grid)
            self._cache[key] = tuple(np.diff(cells, axis=a) / grid.spacing[a] for a in range(grid.dim))
        return self._cache[key]

    def cells(self, grid: Grid, t: float) -> NDArray:
        return self.space_cells(grid) * self.time.value(t)

    def faces(self, grid: Grid, t: float) -> FaceField:
        tau = self.time.value(t)
        return FaceField(grid, tuple(c * tau for c in self.space_faces(grid)))

    def gradient(self, grid: Grid, t: float) -> FaceField:
        tau = self.time.value(t)
        return FaceField(grid, tuple(c * tau for c in self.space_gradient(grid)))

    def time_derivative(self, grid: Grid, t: float) -> NDArray:
        return self.space_cells(grid) * self.time.derivative(t)

    def w1inf_norm(self) -> float:
        """max(sup|phi|, sup|grad phi|) of the space profile."""
        sup = self.amplitude * math.prod(p.sup() for p in self.profiles)
        grads = []
        for axis in range(len(self.profiles)):
            g = self.amplitude
            for a, p in enumerate(self.profiles):
                g *= p.sup_derivative() if a == axis else p.sup()
            grads.append(g)
        return max(sup, math.sqrt(sum(g * g for g in grads)))

    def scaled(self, factor: float) -> TestFunction:
        return TestFunction(
            self.profiles,
            self.time,
            self.nonnegative if factor >= 0 else False,
            self.label,
            self.amplitude * factor,
        )


@dataclass(frozen=True)
class TestFunctionSet:
    members: tuple[TestFunction, ...]
    t_end: float
    dt: float

    __test__ = False

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    @property
    def labels(self) -> list[str]:
        return [m.label for m in self.members]

    def validate(self, grid: Grid) -> list[str]:
        """Return the invariant violations, empty when the set is admissible."""
        problems = []
        cutoff = self.t_end - self.dt
        for m in self.members:
            if m.time.kind != "static" and m.time.support_end > cutoff + 1e-12:
                problems.append(f"{m.label}: support reaches t={m.time.support_end} beyond T-dt={cutoff}")
            if m.nonnegative:
                if np.min(m.space_cells(grid)) < 0.0 or any(np.min(c) < 0.0 for c in m.space_faces(grid)):
                    problems.append(f"{m.label}: tagged nonnegative but negative at a quadrature point")
        return problems

    def scaled(self, factor: float) -> TestFunctionSet:
        return TestFunctionSet(tuple(m.scaled(factor) for m in self.members), self.t_end, self.dt)

    def nonnegative_only(self) -> TestFunctionSet:
        return TestFunctionSet(tuple(m for m in self.members if m.nonnegative), self.t_end, self.dt)

    @classmethod
    def standard(cls, grid: Grid, t_end: float, dt: float, narrow: int = 0) -> TestFunctionSet:
        """Eight nonnegative members: four space bumps times a start and a window bump.

        `narrow` adds that many short window bumps (width 8 dt) which make the
        weak checks sensitive to single-frame defects.
        """
        last = t_end - 2.0 * dt
        times = [TimeFactor("start", 0.0, 0.5 * last), TimeFactor("window", 0.25 * last, last)]
        members = []
        for space, space_label in _bump_profiles(grid):
            for tau in times:
                members.append(TestFunction(space, tau, True, f"{space_label}*{tau.kind}"))
        members.extend(_narrow_members(grid, t_end, dt, narrow))
        return cls(tuple(members), t_end, dt)

    @classmethod
    def signed(cls, grid: Grid, t_end: float, dt: float, narrow: int = 0) -> TestFunctionSet:
        """Cosine modes m = 0..3 on every axis times a start and a window bump."""
        last = t_end - 2.0 * dt
        times = [TimeFactor("start", 0.0, 0.5 * last), TimeFactor("window", 0.25 * last, last)]
        members = []
        for m in range(4):
            profiles = tuple(Profile1D("cos", 0.0, grid.extents[a], m) for a in range(grid.dim))
            for tau in times:
                members.append(TestFunction(profiles, tau, m == 0, f"cos{m}*{tau.kind}"))
        members.extend(_narrow_members(grid, t_end, dt, narrow))
        return cls(tuple(members), t_end, dt)


def _bump_profiles(grid: Grid) -> list[tuple[tuple[Profile1D, ...], str]]:
    out = []
    for lo, hi, label in ((0.0, 0.5, "left"), (0.25, 0.75, "mid"), (0.5, 1.0, "right"), (0.0, 1.0, "full")):
        profiles = tuple(Profile1D("bump", lo * grid.extents[a], hi * grid.extents[a]) for a in range(grid.dim))
        out.append((profiles, label))
    return out


def _narrow_members(grid: Grid, t_end: float, dt: float, count: int) -> list[TestFunction]:
    if count <= 0:
        return []
    width = 8.0 * dt
    last = t_end - 2.0 * dt
    members = []
    profiles = tuple(Profile1D("bump", 0.0, grid.extents[a]) for a in range(grid.dim))
    for i in range(count):
        center = (i + 1) * last / (count + 1)
        t0 = max(center - 0.5 * width, 0.0)
        t1 = min(center + 0.5 * width, last)
        members.append(TestFunction(profiles, TimeFactor("window", t0, t1), True, f"narrow{i}"))
    return members


def dual_dictionary(grid: Grid) -> TestFunctionSet:
    """Time-independent dictionary normalised to unit W^{1,inf} surrogate norm."""
    members = []
    ones = tuple(Profile1D("one", 0.0, grid.extents[a]) for a in range(grid.dim))
    members.append(TestFunction(ones, TimeFactor("static"), True, "one"))
    for axis in range(grid.dim):
        profiles = list(ones)
        profiles[axis] = Profile1D("ramp", 0.0, grid.extents[axis])
        members.append(TestFunction(tuple(profiles), TimeFactor("static"), True, f"ramp{axis}"))
        for m in range(1, 9):
            profiles = list(ones)
            profiles[axis] = Profile1D("cos", 0.0, grid.extents[axis], m)
            members.append(TestFunction(tuple(profiles), TimeFactor("static"), False, f"cos{m}_axis{axis}"))
    normalised = tuple(m.scaled(1.0 / m.w1inf_norm()) for m in members)
    return TestFunctionSet(normalised, math.inf, 1.0)


# ---------------------------------------------------------------------------
# Discrete weak-form quadrature
# ---------------------------------------------------------------------------


def time_term(traj: FieldTrajectory, test: TestFunction, initial: NDArray | None = None) -> float:
    """-int int z phi_t - int z0 phi(., 0), with phi_t as a forward difference.

    phi_t on step n is (phi(t_{n+1}) - phi(t_n)) / dt paired with frame n+1, the pairing under
    which the implicit Euler weak residual vanishes to round-off.

    `initial` replaces frame 0 in the initial-value term (e.g. ln(u0 + 1)).
    """
    grid = traj.grid
    times = traj.times
    z0 = traj.frames[0].values if initial is None else initial
    total = -integrate(z0 * test.cells(grid, 0.0), grid)
    for n in range(traj.steps):
        dphi = test.cells(grid, float(times[n + 1])) - test.cells(grid, float(times[n]))
        total -= integrate(traj.frames[n + 1].values * dphi, grid)
    return total


def time_term_values(states: Sequence[NDArray], grid: Grid, dt: float, test: TestFunction) -> float:
    """time_term for a sequence of cell arrays (e.g. a composition phi(u, v))."""
    total = -integrate(states[0] * test.cells(grid, 0.0), grid)
    for n in range(len(states) - 1):
        dphi = test.cells(grid, (n + 1) * dt) - test.cells(grid, n * dt)
        total -= integrate(states[n + 1] * dphi, grid)
    return total


def paired_cells(
    grid: Grid, dt: float, steps: int, test: TestFunction, integrand: Callable[[int], NDArray]
) -> float:
    """sum_n dt int integrand(n) phi(t_n), integrand(n) describing the step (t_n, t_{n+1}]."""
    total = 0.0
    for n in range(steps):
        tau = test.time.value(n * dt)
        if tau == 0.0:
            continue
        total += integrate(integrand(n) * test.space_cells(grid) * tau, grid)
    return dt * total


def paired_faces_phi(
    grid: Grid, dt: float, steps: int, test: TestFunction, integrand: Callable[[int], FaceField]
) -> float:
    """sum_n dt sum_faces integrand(n) phi(face, t_n)."""
    total = 0.0
    for n in range(steps):
        tau = test.time.value(n * dt)
        if tau == 0.0:
            continue
        g = integrand(n)
        total += tau * sum(np.sum(c * s) for c, s in zip(g.components, test.space_faces(grid)))
    return dt * grid.face_volume * total


def paired_faces_grad(
    grid: Grid, dt: float, steps: int, test: TestFunction, integrand: Callable[[int], FaceField]
) -> float:
    """sum_n dt sum_faces integrand(n) . grad_h phi(face, t_n).

    grad_h is the face difference of the sampled test function, which makes
    summation by parts against the discrete divergence exact.
    """
    total = 0.0
    for n in range(steps):
        tau = test.time.value(n * dt)
        if tau == 0.0:
            continue
        g = integrand(n)
        total += tau * sum(np.sum(c * s) for c, s in zip(g.components, test.discrete_gradient(grid)))
    return dt * grid.face_volume * total
