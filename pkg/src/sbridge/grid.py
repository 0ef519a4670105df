"""Uniform space-time grids and the immutable field containers built on them.

Cells are ordered row-major (C order) over the spatial axes: the last axis
varies fastest. Every binary dump and CSV export relies on this ordering.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

MIN_CELLS = 8


class SamplingError(ValueError):
    """A coefficient callable produced a non-finite value."""


def _as_tuple(values, cast) -> tuple:
    if np.ndim(values) == 0:
        return (cast(values),)
    return tuple(cast(v) for v in values)


@dataclass(frozen=True)
class Grid:
    """Truncated box ``[lower, upper]`` with ``cells`` uniform cells per axis
    and a uniform partition of ``[t0, t1]`` into ``num_steps`` steps."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    cells: tuple[int, ...]
    t0: float = 0.0
    t1: float = 1.0
    num_steps: int = 100

    def __post_init__(self):
        object.__setattr__(self, "lower", _as_tuple(self.lower, float))
        object.__setattr__(self, "upper", _as_tuple(self.upper, float))
        object.__setattr__(self, "cells", _as_tuple(self.cells, int))
        object.__setattr__(self, "t0", float(self.t0))
        object.__setattr__(self, "t1", float(self.t1))
        object.__setattr__(self, "num_steps", int(self.num_steps))
        if not (len(self.lower) == len(self.upper) == len(self.cells)):
            raise ValueError("lower, upper and cells must have one entry per axis")
        if self.dim < 1:
            raise ValueError("grid needs at least one axis")
        for lo, hi, n in zip(self.lower, self.upper, self.cells):
            if not (np.isfinite(lo) and np.isfinite(hi)) or hi <= lo:
                raise ValueError(f"invalid axis bounds [{lo}, {hi}]")
            if n < MIN_CELLS:
                raise ValueError(f"need at least {MIN_CELLS} cells per axis, got {n}")
        if not self.t1 > self.t0:
            raise ValueError("t1 must exceed t0")
        if self.num_steps < 2:
            raise ValueError("num_steps must be at least 2")

    @property
    def dim(self) -> int:
        return len(self.cells)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.cells

    @property
    def size(self) -> int:
        return int(np.prod(self.cells))

    @property
    def h(self) -> tuple[float, ...]:
        return tuple((hi - lo) / n for lo, hi, n in zip(self.lower, self.upper, self.cells))

    @property
    def dt(self) -> float:
        return (self.t1 - self.t0) / self.num_steps

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.h))

    @property
    def horizon(self) -> float:
        return self.t1 - self.t0

    def times(self) -> np.ndarray:
        """The ``num_steps + 1`` time nodes, index 0 at ``t0``."""
        return self.t0 + self.dt * np.arange(self.num_steps + 1)

    def axis_centers(self, axis: int) -> np.ndarray:
        lo, h = self.lower[axis], self.h[axis]
        return lo + h * (np.arange(self.cells[axis]) + 0.5)

    def points(self) -> np.ndarray:
        """Cell centers as an array of shape ``shape + (dim,)``."""
        axes = [self.axis_centers(a) for a in range(self.dim)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def refined(self, factor: int = 2) -> "Grid":
        """Same box and horizon with ``factor`` times more cells and steps."""
        return Grid(self.lower, self.upper, tuple(n * factor for n in self.cells),
                    self.t0, self.t1, self.num_steps * factor)

    def with_steps(self, num_steps: int) -> "Grid":
        return Grid(self.lower, self.upper, self.cells, self.t0, self.t1, num_steps)


def cell_centers(grid: Grid) -> list[tuple[float, ...]]:
    """Center coordinate of every cell, in row-major order."""
    return [tuple(float(c) for c in p) for p in grid.points().reshape(-1, grid.dim)]


def _frozen(values: np.ndarray) -> np.ndarray:
    arr = np.array(values, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ScalarField:
    grid: Grid
    values: np.ndarray
    time: float = field(default=float("nan"))

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.size != self.grid.size:
            raise ValueError(f"expected {self.grid.size} values, got {vals.size}")
        vals = vals.reshape(self.grid.shape)
        if not np.all(np.isfinite(vals)):
            raise ValueError("scalar field contains non-finite values")
        object.__setattr__(self, "values", _frozen(vals))

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    def __mul__(self, other):
        other = other.values if isinstance(other, ScalarField) else other
        return ScalarField(self.grid, self.values * other, self.time)

    __rmul__ = __mul__

    def __add__(self, other):
        other = other.values if isinstance(other, ScalarField) else other
        return ScalarField(self.grid, self.values + other, self.time)


@dataclass(frozen=True, eq=False)
class VectorField:
    grid: Grid
    values: np.ndarray
    time: float = field(default=float("nan"))

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape[: self.grid.dim] != self.grid.shape or vals.ndim != self.grid.dim + 1:
            vals = vals.reshape(self.grid.shape + (-1,))
        if not np.all(np.isfinite(vals)):
            raise ValueError("vector field contains non-finite values")
        object.__setattr__(self, "values", _frozen(vals))

    @property
    def components(self) -> int:
        return self.values.shape[-1]


@dataclass(frozen=True, eq=False)
class MatrixField:
    grid: Grid
    values: np.ndarray
    time: float = field(default=float("nan"))

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != self.grid.dim + 2 or vals.shape[: self.grid.dim] != self.grid.shape:
            raise ValueError(f"matrix field needs shape {self.grid.shape} + (rows, cols)")
        if not np.all(np.isfinite(vals)):
            raise ValueError("matrix field contains non-finite values")
        object.__setattr__(self, "values", _frozen(vals))

    @property
    def rows(self) -> int:
        return self.values.shape[-2]

    @property
    def cols(self) -> int:
        return self.values.shape[-1]

    def is_symmetric(self, rtol: float = 1e-12) -> bool:
        v = self.values
        scale = max(float(np.max(np.abs(v))), 1.0)
        return bool(np.max(np.abs(v - np.swapaxes(v, -1, -2)), initial=0.0) <= rtol * scale)


def integrate(field: ScalarField) -> float:
    """Midpoint quadrature: sum of cell values times the cell volume."""
    return float(np.sum(field.values) * field.grid.cell_volume)


_KINDS = {"scalar": 0, "vector": 1, "matrix": 2}


def sample_array(fn: Callable, grid: Grid, t: float, kind: str = "scalar") -> np.ndarray:
    """Evaluate ``fn(t, x)`` at every cell center; returns a bare array.

    ``fn`` receives ``x`` of shape ``grid.shape + (dim,)`` and must return an
    array broadcastable to ``grid.shape`` plus zero (scalar), one (vector) or
    two (matrix) trailing axes.
    """
    trailing = _KINDS[kind]
    pts = grid.points()
    out = np.asarray(fn(t, pts), dtype=float)
    if out.ndim < trailing:
        out = out.reshape((1,) * (trailing - out.ndim) + out.shape)
    tail = out.shape[out.ndim - trailing:] if trailing else ()
    out = np.broadcast_to(out, grid.shape + tail)
    bad = ~np.isfinite(out)
    if bad.any():
        if trailing:
            bad = bad.reshape(grid.shape + (-1,)).any(axis=-1)
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise SamplingError(
            f"non-finite value at cell {idx} (x={tuple(float(c) for c in pts[idx])}, t={t})")
    return np.array(out)


def sample(fn: Callable, grid: Grid, t: float, kind: str = "scalar"):
    """Sample a coefficient callable into a Scalar/Vector/MatrixField."""
    values = sample_array(fn, grid, t, kind)
    cls = {"scalar": ScalarField, "vector": VectorField, "matrix": MatrixField}[kind]
    return cls(grid, values, float(t))


def constant_field(grid: Grid, value: float) -> ScalarField:
    return ScalarField(grid, np.full(grid.shape, float(value)))


def field_from_function(grid: Grid, fn: Callable[[np.ndarray], np.ndarray],
                        time: float = float("nan")) -> ScalarField:
    """Scalar field from a function of the point array ``shape + (dim,)``."""
    return ScalarField(grid, np.broadcast_to(fn(grid.points()), grid.shape), time)


def same_grid(*fields) -> Grid:
    grid = fields[0].grid
    for f in fields[1:]:
        if f.grid != grid:
            raise ValueError("fields live on different grids")
    return grid
