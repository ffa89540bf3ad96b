"""Uniform tensor-product grids, fields on them, difference stencils and quadrature.

Two grids are used throughout the package:

* :class:`SolidGrid` is node based and discretizes the reference rectangle of
  the solid (the Lagrangian configuration).
* :class:`FluidGrid` is cell based and discretizes the fixed container.
  Density lives in cell centres, velocity components on the faces normal to
  their own axis (a MAC layout).

Difference operators are stored as small dense 1D matrices and applied along
one axis at a time, so a derivative of a nodal array is a single tensor
contraction and its adjoint is the same contraction with the transpose.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np


class StencilUnderflowError(ValueError):
    """Raised when a grid axis has too few points for the requested stencil."""


def _as_vector(values, d=None, name="value"):
    arr = np.atleast_1d(np.asarray(values, dtype=float))
    if d is not None and arr.shape != (d,):
        raise ValueError(f"{name} must have {d} components, got {arr.shape}")
    return arr


@dataclass(frozen=True)
class SolidGrid:
    """Node grid over the box ``[origin, origin + extent]``."""

    origin: tuple
    extent: tuple
    resolution: tuple

    def __post_init__(self):
        origin = tuple(float(v) for v in np.atleast_1d(self.origin))
        extent = tuple(float(v) for v in np.atleast_1d(self.extent))
        res = tuple(int(v) for v in np.atleast_1d(self.resolution))
        if not (len(origin) == len(extent) == len(res)):
            raise ValueError("origin, extent and resolution must share a dimension")
        if any(e <= 0 for e in extent):
            raise ValueError(f"extent must be positive, got {extent}")
        if any(n < 4 for n in res):
            raise ValueError(f"solid grid needs at least 4 nodes per axis, got {res}")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "extent", extent)
        object.__setattr__(self, "resolution", res)

    @property
    def dim(self):
        return len(self.resolution)

    @property
    def shape(self):
        return self.resolution

    @property
    def spacing(self):
        return tuple(e / (n - 1) for e, n in zip(self.extent, self.resolution))

    @property
    def size(self):
        return int(np.prod(self.resolution))

    def axes(self):
        return [o + h * np.arange(n) for o, h, n in zip(self.origin, self.spacing, self.resolution)]

    def coordinates(self):
        """Node coordinates, shape ``(d, *resolution)``."""
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"))

    def weights(self):
        """Tensor-product trapezoid weights, shape ``resolution``."""
        return _trapezoid_weights(self.resolution, self.spacing)

    def boundary_mask(self):
        mask = np.zeros(self.resolution, dtype=bool)
        for axis in range(self.dim):
            index = [slice(None)] * self.dim
            index[axis] = 0
            mask[tuple(index)] = True
            index[axis] = -1
            mask[tuple(index)] = True
        return mask


@dataclass(frozen=True)
class FluidGrid:
    """Cell grid over the container ``[origin, origin + extent]``."""

    origin: tuple
    extent: tuple
    resolution: tuple
    staggering: str = "mac"

    def __post_init__(self):
        origin = tuple(float(v) for v in np.atleast_1d(self.origin))
        extent = tuple(float(v) for v in np.atleast_1d(self.extent))
        res = tuple(int(v) for v in np.atleast_1d(self.resolution))
        if not (len(origin) == len(extent) == len(res)):
            raise ValueError("origin, extent and resolution must share a dimension")
        if any(e <= 0 for e in extent):
            raise ValueError(f"extent must be positive, got {extent}")
        if any(n < 8 for n in res):
            raise ValueError(f"fluid grid needs at least 8 cells per axis, got {res}")
        if self.staggering != "mac":
            raise ValueError("only the MAC layout (cell density, face velocity) is supported")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "extent", extent)
        object.__setattr__(self, "resolution", res)

    @property
    def dim(self):
        return len(self.resolution)

    @property
    def shape(self):
        return self.resolution

    @property
    def spacing(self):
        return tuple(e / n for e, n in zip(self.extent, self.resolution))

    @property
    def cell_volume(self):
        return float(np.prod(self.spacing))

    @property
    def upper(self):
        return tuple(o + e for o, e in zip(self.origin, self.extent))

    def center_axes(self):
        return [o + h * (np.arange(n) + 0.5) for o, h, n in zip(self.origin, self.spacing, self.resolution)]

    def centers(self):
        """Cell-centre coordinates, shape ``(d, *resolution)``."""
        return np.stack(np.meshgrid(*self.center_axes(), indexing="ij"))

    def face_shape(self, axis):
        shape = list(self.resolution)
        shape[axis] += 1
        return tuple(shape)

    def face_coordinates(self, axis):
        """Coordinates of the faces normal to ``axis``, shape ``(d, *face_shape)``."""
        axes = self.center_axes()
        o, h, n = self.origin[axis], self.spacing[axis], self.resolution[axis]
        axes[axis] = o + h * np.arange(n + 1)
        return np.stack(np.meshgrid(*axes, indexing="ij"))

    def cell_index(self, points):
        """Integer cell index of each point (``points`` has shape ``(d, ...)``).

        Points outside the container get index -1 on the offending axis.
        """
        points = np.asarray(points, dtype=float)
        idx = []
        for axis in range(self.dim):
            i = np.floor((points[axis] - self.origin[axis]) / self.spacing[axis]).astype(int)
            i = np.where((i < 0) | (i >= self.resolution[axis]), -1, i)
            idx.append(i)
        return np.stack(idx)

    def contains(self, points, closed=True):
        points = np.asarray(points, dtype=float)
        inside = np.ones(points.shape[1:], dtype=bool)
        for axis in range(self.dim):
            lo, hi = self.origin[axis], self.upper[axis]
            if closed:
                inside &= (points[axis] >= lo) & (points[axis] <= hi)
            else:
                inside &= (points[axis] > lo) & (points[axis] < hi)
        return inside

    def wall_distance(self, points):
        """Distance to the container boundary; negative outside."""
        points = np.asarray(points, dtype=float)
        dist = np.full(points.shape[1:], np.inf)
        for axis in range(self.dim):
            dist = np.minimum(dist, points[axis] - self.origin[axis])
            dist = np.minimum(dist, self.upper[axis] - points[axis])
        return dist

    def integrate_cells(self, values):
        return float(np.sum(values) * self.cell_volume)


@dataclass
class Field:
    """Values of rank ``rank`` attached to the nodes or cells of a grid.

    The component axes come first: a scalar has shape ``grid.shape``, a vector
    ``(d, *grid.shape)`` and a tensor ``(d, d, *grid.shape)``.
    """

    grid: object
    values: np.ndarray
    rank: int = 0
    time: float = 0.0
    location: str = field(default="")

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not self.location:
            self.location = "node" if isinstance(self.grid, SolidGrid) else "cell"
        expected = (self.grid.dim,) * self.rank + tuple(self.grid.shape)
        if self.values.shape != expected:
            raise ValueError(f"field values have shape {self.values.shape}, expected {expected}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field contains non-finite values")

    def __add__(self, other):
        return Field(self.grid, self.values + other.values, self.rank, self.time, self.location)

    def __mul__(self, scalar):
        return Field(self.grid, self.values * scalar, self.rank, self.time, self.location)

    __rmul__ = __mul__


def _trapezoid_weights(resolution, spacing):
    w = np.ones(())
    for n, h in zip(resolution, spacing):
        w1 = np.full(n, h)
        w1[0] = w1[-1] = 0.5 * h
        w = np.multiply.outer(w, w1)
    return w


@lru_cache(maxsize=64)
def first_difference_matrix(n, h):
    """Second-order first-derivative matrix with one-sided boundary rows."""
    if n < 3:
        raise StencilUnderflowError(f"first derivative needs >= 3 points, got {n}")
    D = np.zeros((n, n))
    for i in range(1, n - 1):
        D[i, i - 1] = -0.5
        D[i, i + 1] = 0.5
    D[0, :3] = (-1.5, 2.0, -0.5)
    D[-1, -3:] = (0.5, -2.0, 1.5)
    D /= h
    D.setflags(write=False)
    return D


@lru_cache(maxsize=64)
def second_difference_matrix(n, h):
    """Compact second-derivative matrix with second-order one-sided boundary rows."""
    if n < 5:
        raise StencilUnderflowError(f"second derivative needs >= 5 points, got {n}")
    D = np.zeros((n, n))
    for i in range(1, n - 1):
        D[i, i - 1 : i + 2] = (1.0, -2.0, 1.0)
    D[0, :4] = (2.0, -5.0, 4.0, -1.0)
    D[-1, -4:] = (-1.0, 4.0, -5.0, 2.0)
    D /= h * h
    D.setflags(write=False)
    return D


def derivative_matrix(n, h, order):
    """1D matrix for the ``order``-th derivative (0 gives the identity).

    Orders above two compose the first-derivative matrix with the compact
    second-derivative matrix, which keeps every order exact on polynomials of
    degree <= 2 and sensitive to odd-even modes.
    """
    if order == 0:
        return np.eye(n)
    if order == 1:
        return first_difference_matrix(n, h)
    if order == 2:
        return second_difference_matrix(n, h)
    D1 = first_difference_matrix(n, h)
    out = second_difference_matrix(n, h)
    for _ in range(order - 2):
        out = D1 @ out
    return out


def apply_along(matrix, values, axis):
    """Apply a 1D matrix along spatial ``axis`` of an array whose trailing
    ``d`` axes are spatial."""
    moved = np.moveaxis(values, axis, -1)
    out = moved @ matrix.T
    return np.moveaxis(out, -1, axis)


def _spatial_axis(values, grid, axis):
    return values.ndim - grid.dim + axis


def partial(values, grid, axis, order=1):
    """``order``-th partial derivative along ``axis`` of node/cell values."""
    n, h = grid.shape[axis], grid.spacing[axis]
    return apply_along(derivative_matrix(n, h, order), values, _spatial_axis(values, grid, axis))


def partial_adjoint(values, grid, axis, order=1):
    """Transpose of :func:`partial` (used by exact discrete gradients)."""
    n, h = grid.shape[axis], grid.spacing[axis]
    return apply_along(derivative_matrix(n, h, order).T, values, _spatial_axis(values, grid, axis))


def _partial_exact(values, grid, axis, order=1):
    # the stencils annihilate constants; removing the first value along the
    # axis makes that exact in floating point as well
    ax = _spatial_axis(values, grid, axis)
    base = np.take(values, [0], axis=ax)
    return partial(values - base, grid, axis, order)


def _check_stencil(grid, needed):
    small = [n for n in grid.shape if n < needed]
    if small:
        raise StencilUnderflowError(f"grid resolution {grid.shape} too small; need >= {needed} points per axis")


def differentiate(fld, mode):
    """Differentiate a field.

    ``mode`` is one of ``gradient`` (rank + 1, derivative index last),
    ``divergence`` (rank - 1, contracts the last component index),
    ``hessian`` (rank + 2) and ``laplacian`` (rank preserved).
    """
    grid, v, d = fld.grid, fld.values, fld.grid.dim
    if mode == "gradient":
        _check_stencil(grid, 3)
        out = np.stack([_partial_exact(v, grid, b) for b in range(d)], axis=fld.rank)
        rank = fld.rank + 1
    elif mode == "divergence":
        if fld.rank < 1:
            raise ValueError("divergence needs a field of rank >= 1")
        _check_stencil(grid, 3)
        out = sum(_partial_exact(np.take(v, b, axis=fld.rank - 1), grid, b) for b in range(d))
        rank = fld.rank - 1
    elif mode == "hessian":
        _check_stencil(grid, 5)
        rows = []
        for b in range(d):
            row = []
            for c in range(d):
                if b == c:
                    row.append(_partial_exact(v, grid, b, order=2))
                else:
                    row.append(_partial_exact(_partial_exact(v, grid, c), grid, b))
            rows.append(np.stack(row, axis=fld.rank))
        out = np.stack(rows, axis=fld.rank)
        rank = fld.rank + 2
    elif mode == "laplacian":
        _check_stencil(grid, 5)
        out = sum(_partial_exact(v, grid, b, order=2) for b in range(d))
        rank = fld.rank
    else:
        raise ValueError(f"unknown differentiation mode {mode!r}")
    return Field(grid, out, rank, fld.time, fld.location)


def integrate(fld):
    """Quadrature of a scalar field: trapezoid on nodes, midpoint on cells."""
    if fld.rank != 0:
        raise ValueError("integrate expects a scalar field")
    if isinstance(fld.grid, SolidGrid):
        return float(np.sum(fld.values * fld.grid.weights()))
    return fld.grid.integrate_cells(fld.values)
