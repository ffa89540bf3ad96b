"""Deformation fields: gradients, Jacobians, rasterization and inversion.

A deformation is stored as nodal positions on a :class:`SolidGrid`.  Between
nodes it is read as the piecewise bilinear interpolant, which is what the
rasterizer and the inverse map use.  The finite-difference gradient from
:mod:`fsisim.grids` is what the energies use.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grids import Field, FluidGrid, SolidGrid, differentiate


class DegenerateJacobianError(ValueError):
    """The deformation has a non-positive Jacobian somewhere."""


class InverseMapNoConvergence(RuntimeError):
    """Newton iteration for the inverse map did not converge."""


@dataclass
class DeformationField:
    """Nodal positions (and velocities) of the solid, shape ``(d, *grid.shape)``."""

    grid: SolidGrid
    positions: np.ndarray
    velocity: np.ndarray | None = None
    time: float = 0.0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        shape = (self.grid.dim, *self.grid.shape)
        if self.positions.shape != shape:
            raise ValueError(f"positions have shape {self.positions.shape}, expected {shape}")
        if self.velocity is None:
            self.velocity = np.zeros(shape)
        else:
            self.velocity = np.asarray(self.velocity, dtype=float)
            if self.velocity.shape != shape:
                raise ValueError(f"velocity has shape {self.velocity.shape}, expected {shape}")
        if not (np.all(np.isfinite(self.positions)) and np.all(np.isfinite(self.velocity))):
            raise ValueError("deformation contains non-finite values")

    @classmethod
    def identity(cls, grid, time=0.0):
        return cls(grid, grid.coordinates(), time=time)

    @classmethod
    def affine(cls, grid, matrix, shift=None, time=0.0):
        """``eta(X) = matrix @ X + shift``."""
        X = grid.coordinates()
        A = np.asarray(matrix, dtype=float)
        pos = np.einsum("ab,b...->a...", A, X)
        if shift is not None:
            pos = pos + np.asarray(shift, dtype=float).reshape((-1,) + (1,) * grid.dim)
        return cls(grid, pos, time=time)

    def with_positions(self, positions, velocity=None, time=None):
        return DeformationField(
            self.grid,
            positions,
            self.velocity if velocity is None else velocity,
            self.time if time is None else time,
        )

    def centroid(self):
        w = self.grid.weights()
        return np.array([np.sum(w * p) for p in self.positions]) / np.sum(w)


@dataclass
class SolidMask:
    """Eulerian footprint of the deformed solid on a fluid grid."""

    grid: FluidGrid
    coverage: np.ndarray
    weight: np.ndarray
    preimage: np.ndarray = field(repr=False, default=None)

    def covered(self):
        return self.coverage > 0


@dataclass
class AdmissibilityReport:
    min_det: float
    cn_residual: float
    cn_tolerance: float
    contained: bool
    admissible: bool


def determinant(F):
    """Pointwise determinant of a tensor array of shape ``(d, d, ...)``."""
    d = F.shape[0]
    if d == 1:
        return F[0, 0].copy()
    if d == 2:
        return F[0, 0] * F[1, 1] - F[0, 1] * F[1, 0]
    if d == 3:
        return (
            F[0, 0] * (F[1, 1] * F[2, 2] - F[1, 2] * F[2, 1])
            - F[0, 1] * (F[1, 0] * F[2, 2] - F[1, 2] * F[2, 0])
            + F[0, 2] * (F[1, 0] * F[2, 1] - F[1, 1] * F[2, 0])
        )
    return np.linalg.det(np.moveaxis(F, (0, 1), (-2, -1)))


def cofactor(F):
    """Cofactor matrix ``det(F) F^{-T}`` pointwise, shape ``(d, d, ...)``."""
    d = F.shape[0]
    if d == 2:
        return np.stack([np.stack([F[1, 1], -F[1, 0]]), np.stack([-F[0, 1], F[0, 0]])])
    if d == 3:
        out = np.empty_like(F)
        for i in range(3):
            for j in range(3):
                i1, i2 = (i + 1) % 3, (i + 2) % 3
                j1, j2 = (j + 1) % 3, (j + 2) % 3
                out[i, j] = F[i1, j1] * F[i2, j2] - F[i1, j2] * F[i2, j1]
        return out
    if d == 1:
        return np.ones_like(F)
    Fm = np.moveaxis(F, (0, 1), (-2, -1))
    cof = np.linalg.det(Fm)[..., None, None] * np.swapaxes(np.linalg.inv(Fm), -1, -2)
    return np.moveaxis(cof, (-2, -1), (0, 1))


def gradient_array(positions, grid):
    """``F[a, b] = d eta_a / d X_b`` as a plain array."""
    return differentiate(Field(grid, positions, rank=1), "gradient").values


def deformation_gradient(state):
    """Return ``(F, det, min_det)`` with ``F`` a rank-2 field and ``det`` a scalar field."""
    F = differentiate(Field(state.grid, state.positions, rank=1, time=state.time), "gradient")
    det = determinant(F.values)
    return F, Field(state.grid, det, rank=0, time=state.time), float(det.min())


def _require_positive_det(state):
    _, _, min_det = deformation_gradient(state)
    if not min_det > 0:
        raise DegenerateJacobianError(f"min det grad eta = {min_det:.3e} <= 0")
    return min_det


def _require_2d(grid):
    if grid.dim != 2:
        raise NotImplementedError("rasterization and inversion are implemented for d = 2")


def boundary_loop(grid):
    """Node indices of the reference boundary in counter-clockwise order."""
    n0, n1 = grid.shape
    loop = [(i, 0) for i in range(n0 - 1)]
    loop += [(n0 - 1, j) for j in range(n1 - 1)]
    loop += [(i, n1 - 1) for i in range(n0 - 1, 0, -1)]
    loop += [(0, j) for j in range(n1 - 1, 0, -1)]
    return np.array(loop)


def image_triangles(state):
    """Deformed triangles (two per solid cell), shape ``(ntri, 3, 2)``."""
    _require_2d(state.grid)
    p = np.moveaxis(state.positions, 0, -1)
    a, b = p[:-1, :-1], p[1:, :-1]
    c, e = p[1:, 1:], p[:-1, 1:]
    t1 = np.stack([a, b, c], axis=-2).reshape(-1, 3, 2)
    t2 = np.stack([a, c, e], axis=-2).reshape(-1, 3, 2)
    return np.concatenate([t1, t2])


def _signed_area(tri):
    u = tri[:, 1] - tri[:, 0]
    v = tri[:, 2] - tri[:, 0]
    return 0.5 * (u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0])


def cn_residual(state, probe_resolution, offset=0.5):
    """Gap between the rasterized image volume and the integral of the Jacobian.

    The image is the union of forward-mapped triangles; a probe cell counts as
    covered when its centre lies in at least one triangle, so overlapping
    regions are counted once.  ``offset`` shifts the probe lattice by a
    fraction of a probe cell, which lets callers average out lattice effects.
    """
    _require_positive_det(state)
    tris = image_triangles(state)
    area = _signed_area(tris)
    jac_integral = float(np.sum(area))

    lo = state.positions.reshape(2, -1).min(axis=1)
    hi = state.positions.reshape(2, -1).max(axis=1)
    hp = float(np.max(hi - lo)) / int(probe_resolution)
    origin = lo - (1.0 - offset) * hp
    counts = np.ceil((hi - origin) / hp).astype(int) + 1
    covered = np.zeros(counts, dtype=bool)

    tmin = np.floor((tris.min(axis=1) - origin) / hp - 0.5).astype(int)
    tmax = np.ceil((tris.max(axis=1) - origin) / hp - 0.5).astype(int)
    tmin = np.clip(tmin, 0, counts - 1)
    tmax = np.clip(tmax, 0, counts - 1)
    for t in range(len(tris)):
        i0, j0 = tmin[t]
        i1, j1 = tmax[t]
        xs = origin[0] + hp * (np.arange(i0, i1 + 1) + 0.5)
        ys = origin[1] + hp * (np.arange(j0, j1 + 1) + 0.5)
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        inside = _points_in_triangle(X, Y, tris[t], area[t])
        covered[i0 : i1 + 1, j0 : j1 + 1] |= inside
    raster = float(np.count_nonzero(covered)) * hp * hp
    return abs(raster - jac_integral)


def _points_in_triangle(X, Y, tri, area):
    (x0, y0), (x1, y1), (x2, y2) = tri
    sign = 1.0 if area > 0 else -1.0
    l0 = sign * ((x1 - X) * (y2 - Y) - (x2 - X) * (y1 - Y))
    l1 = sign * ((x2 - X) * (y0 - Y) - (x0 - X) * (y2 - Y))
    l2 = sign * ((x0 - X) * (y1 - Y) - (x1 - X) * (y0 - Y))
    # half-open edge rule would be exact; a tiny tolerance is enough for probes
    tol = -1e-14 * abs(area)
    return (l0 >= tol) & (l1 >= tol) & (l2 > tol)


def image_perimeter(state):
    _require_2d(state.grid)
    loop = boundary_loop(state.grid)
    pts = state.positions[:, loop[:, 0], loop[:, 1]].T
    return float(np.sum(np.linalg.norm(np.roll(pts, -1, axis=0) - pts, axis=1)))


def subdivision_factor(solid_grid, fluid_grid):
    ratio = max(hs / hf for hs in solid_grid.spacing for hf in fluid_grid.spacing)
    return max(1, int(np.ceil(4.0 * ratio)))


def rasterize_solid(state, fluid_grid, subdivision=None):
    """Coverage fraction and pushforward weight of the deformed solid per fluid cell."""
    _require_2d(state.grid)
    _require_positive_det(state)
    sg = state.grid
    s = subdivision or subdivision_factor(sg, fluid_grid)
    p = state.positions
    e00, e10 = p[:, :-1, :-1], p[:, 1:, :-1]
    e01, e11 = p[:, :-1, 1:], p[:, 1:, 1:]
    loc = (np.arange(s) + 0.5) / s
    S, T = np.meshgrid(loc, loc, indexing="ij")
    S = S[None, None, None]
    T = T[None, None, None]
    E = lambda arr: arr[..., None, None]
    pts = (1 - S) * (1 - T) * E(e00) + S * (1 - T) * E(e10) + (1 - S) * T * E(e01) + S * T * E(e11)
    ds = (1 - T) * (E(e10) - E(e00)) + T * (E(e11) - E(e01))
    dt = (1 - S) * (E(e01) - E(e00)) + S * (E(e11) - E(e10))
    jac = ds[0] * dt[1] - ds[1] * dt[0]  # area of the image of a unit (s, t) square
    img_area = jac / (s * s)
    ref_area = sg.spacing[0] * sg.spacing[1] / (s * s)

    idx = fluid_grid.cell_index(pts.reshape(2, -1))
    ok = np.all(idx >= 0, axis=0)
    flat = np.ravel_multi_index(idx[:, ok], fluid_grid.shape)
    ncell = int(np.prod(fluid_grid.shape))
    mapped = np.bincount(flat, weights=img_area.ravel()[ok], minlength=ncell)
    count = np.bincount(flat, minlength=ncell).astype(float)
    vol = fluid_grid.cell_volume
    coverage = np.clip(mapped / vol, 0.0, 1.0).reshape(fluid_grid.shape)
    weight = np.zeros(ncell)
    hit = mapped > 0
    weight[hit] = count[hit] * ref_area / mapped[hit]
    weight = weight.reshape(fluid_grid.shape)

    # reference coordinates of one subcell per covered cell, seeds the inverse map
    nc0, nc1 = sg.shape[0] - 1, sg.shape[1] - 1
    I, J = np.meshgrid(np.arange(nc0), np.arange(nc1), indexing="ij")
    ref_x = sg.origin[0] + sg.spacing[0] * (I[..., None, None] + S[0, 0, 0])
    ref_y = sg.origin[1] + sg.spacing[1] * (J[..., None, None] + T[0, 0, 0])
    ref = np.stack([ref_x, ref_y]).reshape(2, -1)[:, ok]
    first_cell, first = np.unique(flat, return_index=True)
    preimage = np.full((2, ncell), np.nan)
    preimage[:, first_cell] = ref[:, first]
    preimage = preimage.reshape((2, *fluid_grid.shape))
    return SolidMask(fluid_grid, coverage, weight, preimage)


def _bilinear(state, X):
    """Evaluate the bilinear interpolant and its Jacobian at reference point X.

    Outside the reference box the boundary cell is extrapolated.
    """
    g = state.grid
    u = (np.asarray(X) - np.array(g.origin)) / np.array(g.spacing)
    idx = np.clip(np.floor(u).astype(int), 0, np.array(g.shape) - 2)
    s, t = u - idx
    i, j = idx
    p = state.positions
    e00, e10, e01, e11 = p[:, i, j], p[:, i + 1, j], p[:, i, j + 1], p[:, i + 1, j + 1]
    val = (1 - s) * (1 - t) * e00 + s * (1 - t) * e10 + (1 - s) * t * e01 + s * t * e11
    ds = ((1 - t) * (e10 - e00) + t * (e11 - e01)) / g.spacing[0]
    dt = ((1 - s) * (e01 - e00) + s * (e11 - e10)) / g.spacing[1]
    return val, np.column_stack([ds, dt])


def evaluate(state, X):
    """Bilinear interpolant of the deformation at reference point(s) X (shape ``(2,)``)."""
    return _bilinear(state, X)[0]


def inverse_map(state, point, mask=None, max_iter=50):
    """Reference point mapped to ``point``, or ``None`` when it is not covered."""
    _require_2d(state.grid)
    _require_positive_det(state)
    g = state.grid
    point = np.asarray(point, dtype=float)
    h = min(g.spacing)
    X = None
    if mask is not None:
        idx = mask.grid.cell_index(point.reshape(2, 1))[:, 0]
        if np.all(idx >= 0):
            seed = mask.preimage[:, idx[0], idx[1]]
            if np.all(np.isfinite(seed)):
                X = seed.copy()
    if X is None:
        flat = state.positions.reshape(2, -1)
        k = int(np.argmin(np.sum((flat - point[:, None]) ** 2, axis=0)))
        X = g.coordinates().reshape(2, -1)[:, k].copy()

    lo = np.array(g.origin)
    hi = lo + np.array(g.extent)
    for _ in range(max_iter):
        val, J = _bilinear(state, X)
        step = np.linalg.solve(J, point - val)
        X = X + step
        if np.linalg.norm(step) <= 1e-10 * h:
            inside = np.all(X >= lo - 1e-9 * h) and np.all(X <= hi + 1e-9 * h)
            return np.clip(X, lo, hi) if inside else None
    if np.any(X < lo - h) or np.any(X > hi + h):
        return None
    raise InverseMapNoConvergence(f"inverse map did not converge for point {point.tolist()}")


def admissibility_check(state, container, cn_tolerance=None, probe_resolution=128):
    """Aggregate positivity of the Jacobian, the injectivity residual and containment."""
    _, _, min_det = deformation_gradient(state)
    contained = bool(np.all(container.contains(state.positions.reshape(state.grid.dim, -1))))
    if min_det > 0 and state.grid.dim == 2:
        residual = cn_residual(state, probe_resolution)
        if cn_tolerance is None:
            lo = state.positions.reshape(2, -1).min(axis=1)
            hi = state.positions.reshape(2, -1).max(axis=1)
            cn_tolerance = float(np.max(hi - lo)) / probe_resolution * image_perimeter(state)
    else:
        residual = np.inf
        cn_tolerance = np.inf if cn_tolerance is None else cn_tolerance
    admissible = bool(min_det > 0 and residual <= cn_tolerance and contained)
    return AdmissibilityReport(min_det, residual, cn_tolerance, contained, admissible)
