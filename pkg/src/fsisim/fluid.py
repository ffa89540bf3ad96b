"""Compressible barotropic flow on the fixed container (2D MAC grid).

Density sits in cell centres and each velocity component on the faces normal
to its axis; the no-slip walls are the boundary faces, which stay zero.

One substep does

1. continuity: explicit first-order upwind fluxes, implicit density damping
   with homogeneous Neumann data, explicit sink on the solid footprint;
2. momentum: explicit upwind convection with dual fluxes built from the mass
   fluxes, explicit pressure at the new density, implicit viscosity, implicit
   sink and velocity-matching penalty.

The penalty couples the face velocities to the solid through bilinear
interpolation ``P`` to the deformed solid nodes; the Eulerian force is the
adjoint ``-(1/h) P^T W (P u - V)`` of the Lagrangian one, so momentum and
energy exchanged with the solid balance exactly.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .kinematics import rasterize_solid, DeformationField


class CFLViolation(RuntimeError):
    """The requested time step exceeds the stability limit."""


class LinearSolveError(RuntimeError):
    """A sparse solve produced non-finite values."""


GAMMA_THRESHOLD = 12.0 / 7.0


@dataclass(frozen=True)
class FluidParams:
    gamma: float = 2.0
    beta: float = 4.0
    mu: float = 0.1
    zeta: float = 0.1
    eps: float = 0.05
    varsigma: float = 1e-3
    cfl: float = 0.4
    viscosity_region: str = "fluid"
    density_floor: float = 1e-10

    def validate(self):
        """Raise on invalid values; return a list of warnings."""
        errors, notes = [], []
        if self.gamma <= 1:
            errors.append(f"gamma must be > 1, got {self.gamma}")
        elif self.gamma <= GAMMA_THRESHOLD:
            notes.append(f"gamma = {self.gamma} is at or below 12/7; the existence theory assumes gamma > 12/7")
        if self.beta < max(4.0, 2.0 * self.gamma):
            errors.append(f"beta must be >= max(4, 2*gamma) = {max(4.0, 2.0 * self.gamma):g}, got {self.beta}")
        if self.mu <= 0 or self.zeta <= 0:
            errors.append(f"mu and zeta must be > 0, got mu={self.mu}, zeta={self.zeta}")
        if self.eps < 0:
            errors.append(f"eps must be >= 0, got {self.eps}")
        if self.varsigma < 0:
            errors.append(f"varsigma must be >= 0, got {self.varsigma}")
        if not 0 < self.cfl <= 1:
            errors.append(f"cfl must lie in (0, 1], got {self.cfl}")
        if self.viscosity_region not in ("fluid", "everywhere"):
            errors.append(f"viscosity_region must be 'fluid' or 'everywhere', got {self.viscosity_region!r}")
        if errors:
            raise ValueError("; ".join(errors))
        for n in notes:
            warnings.warn(n, stacklevel=2)
        return notes


@dataclass
class FluidState:
    grid: object
    rho: np.ndarray
    u: list
    time: float = 0.0

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=float)
        if self.rho.shape != self.grid.shape:
            raise ValueError(f"density has shape {self.rho.shape}, expected {self.grid.shape}")
        if self.u is None:
            self.u = [np.zeros(self.grid.face_shape(a)) for a in range(self.grid.dim)]
        self.u = [np.asarray(c, dtype=float) for c in self.u]
        for a, c in enumerate(self.u):
            if c.shape != self.grid.face_shape(a):
                raise ValueError(f"velocity component {a} has shape {c.shape}, expected {self.grid.face_shape(a)}")
        if np.any(self.rho < 0):
            raise ValueError("density must be non-negative")

    def copy(self):
        return FluidState(self.grid, self.rho.copy(), [c.copy() for c in self.u], self.time)

    def mass(self):
        return float(np.sum(self.rho) * self.grid.cell_volume)


def pressure(rho, params):
    return rho**params.gamma + params.eps * rho**params.beta


def potential(rho, params):
    """Pressure potential split into the physical and the artificial part."""
    return rho**params.gamma / (params.gamma - 1), params.eps * rho**params.beta / (params.beta - 1)


def potential_derivative(rho, params):
    g, b = params.gamma, params.beta
    return g / (g - 1) * rho ** (g - 1) + params.eps * b / (b - 1) * rho ** (b - 1)


def sound_speed(rho, params):
    g, b = params.gamma, params.beta
    return np.sqrt(g * rho ** (g - 1) + params.eps * b * rho ** (b - 1))


def face_density(rho, axis):
    """Arithmetic mean of the two cells adjacent to each face (walls use the one cell)."""
    pad = [(0, 0)] * rho.ndim
    pad[axis] = (1, 1)
    r = np.pad(rho, pad, mode="edge")
    lo = [slice(None)] * rho.ndim
    hi = [slice(None)] * rho.ndim
    lo[axis] = slice(0, -1)
    hi[axis] = slice(1, None)
    return 0.5 * (r[tuple(lo)] + r[tuple(hi)])


def interior(grid, axis):
    """Boolean mask of the faces normal to ``axis`` that are not walls."""
    m = np.ones(grid.face_shape(axis), dtype=bool)
    idx = [slice(None)] * grid.dim
    idx[axis] = 0
    m[tuple(idx)] = False
    idx[axis] = -1
    m[tuple(idx)] = False
    return m


def max_stable_dt(state, mask, params, cfl=None):
    """Largest substep allowed by the advective/acoustic and sink limits."""
    cfl = params.cfl if cfl is None else cfl
    g = state.grid
    c = float(sound_speed(state.rho, params).max())
    rate = sum((float(np.abs(state.u[a]).max()) + c) / g.spacing[a] for a in range(g.dim))
    dt = cfl / rate if rate > 0 else np.inf
    chi = mask.coverage if mask is not None else 0.0
    sink = float(np.max(chi * state.rho)) if mask is not None else 0.0
    if sink > 0:
        dt = min(dt, cfl / sink)
    return dt


def mass_fluxes(state):
    """Upwind mass fluxes on every face (zero on walls)."""
    g = state.grid
    out = []
    for a in range(g.dim):
        u = state.u[a]
        pad = [(0, 0)] * g.dim
        pad[a] = (1, 1)
        r = np.pad(state.rho, pad, mode="edge")
        lo = [slice(None)] * g.dim
        hi = [slice(None)] * g.dim
        lo[a] = slice(0, -1)
        hi[a] = slice(1, None)
        up = np.where(u > 0, r[tuple(lo)], r[tuple(hi)])
        F = u * up
        F[~interior(g, a)] = 0.0
        out.append(F)
    return out


def divergence(faces, grid):
    out = np.zeros(grid.shape)
    for a in range(grid.dim):
        out += np.diff(faces[a], axis=a) / grid.spacing[a]
    return out


@lru_cache(maxsize=8)
def _neumann_laplacian(grid):
    ops = []
    for a in range(grid.dim):
        n = grid.shape[a]
        main = -2.0 * np.ones(n)
        main[0] = main[-1] = -1.0
        L1 = sp.diags([np.ones(n - 1), main, np.ones(n - 1)], [-1, 0, 1]) / grid.spacing[a] ** 2
        mats = [sp.identity(grid.shape[b]) for b in range(grid.dim)]
        mats[a] = L1
        K = mats[0]
        for m in mats[1:]:
            K = sp.kron(K, m)
        ops.append(K)
    return sum(ops).tocsc()


@lru_cache(maxsize=16)
def _damping_factor(grid, coeff):
    n = int(np.prod(grid.shape))
    return spla.factorized((sp.identity(n, format="csc") - coeff * _neumann_laplacian(grid)).tocsc())


def damping_work(rho, params, grid, dt):
    """``dt * varsigma * sum (Pi'(r_R) - Pi'(r_L)) (r_R - r_L) / dx^2`` over interior faces."""
    if params.varsigma == 0:
        return 0.0
    q = potential_derivative(rho, params)
    tot = 0.0
    for a in range(grid.dim):
        tot += np.sum(np.diff(q, axis=a) * np.diff(rho, axis=a)) / grid.spacing[a] ** 2
    return dt * params.varsigma * tot * grid.cell_volume


def sink_work(rho, chi, params, grid, dt):
    g, b = params.gamma, params.beta
    dens = rho ** (g + 1) / (g - 1) + params.eps * rho ** (b + 1) / (b - 1)
    return dt * float(np.sum(chi * dens)) * grid.cell_volume


def continuity_substep(state, mask, params, dt, check_cfl=True):
    """Advance the density; returns ``(rho, info)``."""
    g = state.grid
    if check_cfl:
        limit = max_stable_dt(state, mask, params, cfl=1.0)
        if dt > limit * (1 + 1e-12):
            raise CFLViolation(f"dt = {dt:.3e} exceeds the stability limit {limit:.3e}")
    F = mass_fluxes(state)
    rho = state.rho - dt * divergence(F, g)
    info = {"fluxes": F}
    if params.varsigma > 0:
        solve = _damping_factor(g, float(dt * params.varsigma))
        rho = solve(rho.ravel()).reshape(g.shape)
        if not np.all(np.isfinite(rho)):
            raise LinearSolveError("density damping solve failed")
    info["damping"] = damping_work(rho, params, g, dt)
    chi = mask.coverage if mask is not None else np.zeros(g.shape)
    info["sink"] = sink_work(np.maximum(rho, 0), chi, params, g, dt)
    rho = rho - dt * chi * rho * rho
    neg = rho < 0
    info["clipped_mass"] = float(-np.sum(rho[neg]) * g.cell_volume)
    rho = np.where(neg, 0.0, rho)
    return rho, info


class _Indexer:
    """Maps interior face unknowns of both components to one vector."""

    def __init__(self, grid):
        self.grid = grid
        self.masks = [interior(grid, a) for a in range(grid.dim)]
        self.sizes = [int(m.sum()) for m in self.masks]
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)])
        self.n = int(self.offsets[-1])
        # restriction from full face arrays to unknowns, per component
        self.R = []
        for a, m in enumerate(self.masks):
            cols = np.flatnonzero(m.ravel())
            self.R.append(sp.csr_matrix((np.ones(len(cols)), (np.arange(len(cols)), cols)), shape=(len(cols), m.size)))

    def pack(self, faces):
        return np.concatenate([f[m] for f, m in zip(faces, self.masks)])

    def unpack(self, vec):
        out = []
        for a, m in enumerate(self.masks):
            f = np.zeros(m.shape)
            f[m] = vec[self.offsets[a] : self.offsets[a + 1]]
            out.append(f)
        return out


@lru_cache(maxsize=8)
def _indexer(grid):
    return _Indexer(grid)


def _diff_matrix(n_out, spacing, ghost_lo=None, ghost_hi=None):
    """``(x[k] - x[k-1]) / h`` for ``k = 0..n_out-1`` on an array of length n_out - 1,
    with ghost values ``-x[0]`` and ``-x[-1]`` when requested (else zero)."""
    n_in = n_out - 1
    D = sp.lil_matrix((n_out, n_in))
    for k in range(n_out):
        if k < n_in:
            D[k, k] += 1.0
        if k - 1 >= 0:
            D[k, k - 1] -= 1.0
    if ghost_lo:
        D[0, 0] += 1.0
    if ghost_hi:
        D[n_out - 1, n_in - 1] -= 1.0
    return (D / spacing).tocsr()


@lru_cache(maxsize=8)
def _strain_operators(grid):
    """Sparse maps from the unknown vector to cell normal strains and node shear."""
    if grid.dim != 2:
        raise NotImplementedError("the fluid solver is implemented for d = 2")
    nx, ny = grid.shape
    dx, dy = grid.spacing
    ix = _indexer(grid)
    # cell normal strains from full face arrays
    Dx1 = sp.diags([-np.ones(nx), np.ones(nx)], [0, 1], shape=(nx, nx + 1)) / dx
    Dy1 = sp.diags([-np.ones(ny), np.ones(ny)], [0, 1], shape=(ny, ny + 1)) / dy
    Exx = sp.kron(Dx1, sp.identity(ny)) @ ix.R[0].T
    Eyy = sp.kron(sp.identity(nx), Dy1) @ ix.R[1].T
    # node shear d(ux)/dy + d(uy)/dx with mirrored ghosts at the walls
    Gy = _diff_matrix(ny + 1, dy, True, True)
    Gx = _diff_matrix(nx + 1, dx, True, True)
    Sx = sp.kron(sp.identity(nx + 1), Gy) @ ix.R[0].T
    Sy = sp.kron(Gx, sp.identity(ny + 1)) @ ix.R[1].T
    zero_x = sp.csr_matrix((nx * ny, ix.sizes[1]))
    zero_y = sp.csr_matrix((nx * ny, ix.sizes[0]))
    E_xx = sp.hstack([Exx, zero_x]).tocsr()
    E_yy = sp.hstack([zero_y, Eyy]).tocsr()
    Gam = sp.hstack([Sx, Sy]).tocsr()
    wn = np.ones((nx + 1, ny + 1))
    wn[0, :] *= 0.5
    wn[-1, :] *= 0.5
    wn[:, 0] *= 0.5
    wn[:, -1] *= 0.5
    return E_xx, E_yy, Gam, wn.ravel() * dx * dy


def viscosity_coefficient(mask, params, grid):
    """Cell and node viscosity multipliers: 1 in fluid, eps inside the solid."""
    if mask is None or params.viscosity_region == "everywhere":
        cov = np.zeros(grid.shape)
    else:
        cov = mask.coverage
    cell = 1.0 - (1.0 - params.eps) * cov
    c = np.pad(cov, 1, mode="edge")
    node_cov = 0.25 * (c[:-1, :-1] + c[1:, :-1] + c[:-1, 1:] + c[1:, 1:])
    node = 1.0 - (1.0 - params.eps) * node_cov
    return cell, node


def viscous_matrix(grid, params, mask=None):
    """Symmetric positive definite ``A`` with ``u^T A u`` the viscous dissipation rate."""
    E_xx, E_yy, Gam, wnode = _strain_operators(grid)
    cell, node = viscosity_coefficient(mask, params, grid)
    d = grid.dim
    vol = grid.cell_volume
    mu, ze = params.mu, params.zeta
    k11 = mu * (2 - 2 / d) + ze
    k12 = -mu * 2 / d + ze
    C = sp.diags(cell.ravel() * vol)
    A = k11 * (E_xx.T @ C @ E_xx + E_yy.T @ C @ E_yy) + k12 * (E_xx.T @ C @ E_yy + E_yy.T @ C @ E_xx)
    A = A + mu * (Gam.T @ sp.diags(node.ravel() * wnode) @ Gam)
    return A.tocsr()


def interpolation_matrix(grid, points, axis):
    """Bilinear interpolation of the ``axis`` face velocities to ``points`` (shape ``(n, 2)``).

    Columns index the interior unknowns of that component; mirrored ghosts
    enforce the no-slip value at the walls.
    """
    nx, ny = grid.shape
    dx, dy = grid.spacing
    ox, oy = grid.origin
    shape = grid.face_shape(axis)
    # face coordinates: along ``axis`` nodes, across it cell centres
    fx = (points[:, 0] - ox) / dx - (0.0 if axis == 0 else 0.5)
    fy = (points[:, 1] - oy) / dy - (0.5 if axis == 0 else 0.0)
    i0 = np.floor(fx).astype(int)
    j0 = np.floor(fy).astype(int)
    s = fx - i0
    t = fy - j0
    rows, cols, vals = [], [], []
    n = len(points)
    for di, wi in ((0, 1 - s), (1, s)):
        for dj, wj in ((0, 1 - t), (1, t)):
            I = i0 + di
            J = j0 + dj
            sign = np.ones(n)
            # mirrored ghosts across walls
            for arr, lim in ((I, shape[0]), (J, shape[1])):
                lo = arr < 0
                hi = arr > lim - 1
                arr[lo] = 0
                arr[hi] = lim - 1
                sign[lo | hi] *= -1.0
            rows.append(np.arange(n))
            cols.append(I * shape[1] + J)
            vals.append(sign * wi * wj)
    P = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, shape[0] * shape[1]))
    ix = _indexer(grid)
    return (P @ ix.R[axis].T).tocsr()


def _convection_x(Fx, Fy, ux, dx, dy):
    """Upwind convective flux balance on x-faces from dual mass fluxes."""
    nx1, ny = ux.shape
    Gc = 0.5 * (Fx[:-1] + Fx[1:])  # at cell centres, shape (nx, ny)
    up_c = np.where(Gc > 0, ux[:-1], ux[1:])
    flux_c = Gc * up_c
    out = np.zeros_like(ux)
    out[1:-1] = (flux_c[1:] - flux_c[:-1]) / dx
    Gn = 0.5 * (Fy[:-1] + Fy[1:])  # at nodes of interior x-faces, shape (nx-1, ny+1)
    upx = np.pad(ux[1:-1], ((0, 0), (1, 1)), mode="edge")
    up_n = np.where(Gn > 0, upx[:, :-1], upx[:, 1:])
    flux_n = Gn * up_n
    out[1:-1] += (flux_n[:, 1:] - flux_n[:, :-1]) / dy
    return out


def convection(fluxes, u, grid):
    dx, dy = grid.spacing
    cx = _convection_x(fluxes[0], fluxes[1], u[0], dx, dy)
    cy = _convection_x(fluxes[1].T, fluxes[0].T, u[1].T, dy, dx).T
    return [cx, cy]


def _gradient_dot_x(rho, ux, dx, dy):
    """x-face values of ``(grad rho . grad) u_x`` by central differences."""
    r = np.pad(rho, ((1, 1), (1, 1)), mode="edge")
    drx = np.zeros_like(ux)
    drx[1:-1] = (rho[1:] - rho[:-1]) / dx
    cy = (r[1:-1, 2:] - r[1:-1, :-2]) / (2 * dy)
    dry = np.zeros_like(ux)
    dry[1:-1] = 0.5 * (cy[:-1] + cy[1:])
    dux = np.zeros_like(ux)
    dux[1:-1] = (ux[2:] - ux[:-2]) / (2 * dx)
    ghost = np.concatenate([-ux[:, :1], ux, -ux[:, -1:]], axis=1)
    duy = (ghost[:, 2:] - ghost[:, :-2]) / (2 * dy)
    return drx * dux + dry * duy


def density_gradient_dot(rho, u, grid, axis):
    dx, dy = grid.spacing
    if axis == 0:
        return _gradient_dot_x(rho, u[0], dx, dy)
    return _gradient_dot_x(rho.T, u[1].T, dy, dx).T


def momentum_substep(state, rho_new, fluxes, mask, params, h, dt, penalty=None):
    """Advance the face velocities given the new density.

    ``penalty`` is ``(P_list, W, V)`` with interpolation matrices per
    component, nodal quadrature weights and nodal solid velocities
    ``(n, d)``, or ``None`` for no solid.  Returns ``(u, info)``.
    """
    g = state.grid
    ix = _indexer(g)
    vol = g.cell_volume
    rho_f_old = [face_density(state.rho, a) for a in range(g.dim)]
    rho_f_new = [face_density(rho_new, a) for a in range(g.dim)]
    chi = mask.coverage if mask is not None else np.zeros(g.shape)
    s_f = [face_density(chi * rho_new**2, a) for a in range(g.dim)]
    p = pressure(rho_new, params)
    conv = convection(fluxes, state.u, g)
    rhs = []
    for a in range(g.dim):
        gradp = np.zeros(g.face_shape(a))
        sl_hi = [slice(None)] * g.dim
        sl_lo = [slice(None)] * g.dim
        sl_f = [slice(None)] * g.dim
        sl_hi[a] = slice(1, None)
        sl_lo[a] = slice(0, -1)
        sl_f[a] = slice(1, -1)
        gradp[tuple(sl_f)] = (p[tuple(sl_hi)] - p[tuple(sl_lo)]) / g.spacing[a]
        damp = params.varsigma * density_gradient_dot(state.rho, state.u, g, a) if params.varsigma > 0 else 0.0
        r = rho_f_old[a] * state.u[a] - dt * (conv[a] + gradp + damp)
        rhs.append(r * vol)
    b = ix.pack(rhs)
    diag = ix.pack([(rho_f_new[a] + 0.5 * dt * s_f[a]) * vol for a in range(g.dim)])
    A = viscous_matrix(g, params, mask)
    K = sp.diags(diag) + dt * A
    if penalty is not None:
        Ps, W, V = penalty
        blocks = []
        for a, P in enumerate(Ps):
            blocks.append(P.T @ sp.diags(W) @ P)
            corr = P.T @ (W * V[:, a])
            b[ix.offsets[a] : ix.offsets[a + 1]] += dt / h * corr
        K = K + (dt / h) * sp.block_diag(blocks)
    sol = spla.spsolve(K.tocsc(), b)
    if not np.all(np.isfinite(sol)):
        raise LinearSolveError("momentum solve produced non-finite values")
    u = ix.unpack(sol)
    floor = params.density_floor
    for a in range(g.dim):
        covered = face_density(chi, a) > 0
        dead = (rho_f_new[a] <= floor) & ~covered
        u[a][dead] = 0.0
    info = {"viscous": float(dt * (ix.pack(u) @ (A @ ix.pack(u))))}
    return u, info


def kinetic_energy(state):
    g = state.grid
    return float(sum(0.5 * np.sum(face_density(state.rho, a) * state.u[a] ** 2) for a in range(g.dim)) * g.cell_volume)


def potential_energies(state, params):
    pg, pb = potential(state.rho, params)
    vol = state.grid.cell_volume
    return float(np.sum(pg) * vol), float(np.sum(pb) * vol)


@dataclass
class BinRecord:
    """Fluid-side ledger quantities at the end of one solid substep."""

    time: float
    kinetic: float
    pressure_pot: float
    artificial_pot: float
    viscous: float
    sink: float
    damping: float
    penalty_match: float
    stored: float
    clipped_mass: float
    mass: float
    mask_mass: float
    impulse_fluid: np.ndarray
    impulse_solid: np.ndarray
    mismatch_sq: float
    substeps: int
    rho_min: float


@dataclass
class FspResult:
    state: FluidState
    trace: np.ndarray
    bins: list
    states: list = field(default_factory=list)


def solid_nodes(positions):
    d = positions.shape[0]
    return positions.reshape(d, -1).T


def solve_fsp(state, ssp, params, h, solid_weights, record_states=False):
    """Advance the fluid through one window driven by a solid trajectory.

    ``ssp`` provides ``states`` (M + 1 deformations), ``velocities`` (M
    nodal velocity arrays) and ``dt``.  Returns an :class:`FspResult` whose
    trace holds the per-bin average of the interpolated fluid velocity at the
    solid nodes.
    """
    g = state.grid
    M = len(ssp.velocities)
    Dt = ssp.dt
    W = np.asarray(solid_weights).ravel()
    cur = state.copy()
    trace = np.zeros_like(ssp.velocities)
    bins = []
    snapshots = []
    t_start = cur.time
    for k in range(M):
        V = solid_nodes(ssp.velocities[k])
        pos_a = ssp.states[k].positions
        pos_b = ssp.states[k + 1].positions
        mask0 = rasterize_solid(ssp.states[k], g)
        dt_max = max_stable_dt(cur, mask0, params)
        nsub = max(1, int(np.ceil(Dt / dt_max * (1 - 1e-12))))
        dt = Dt / nsub
        acc = dict(viscous=0.0, sink=0.0, damping=0.0, penalty_match=0.0, stored=0.0, clipped_mass=0.0, mismatch_sq=0.0)
        imp_f = np.zeros(g.dim)
        imp_s = np.zeros(g.dim)
        Usum = np.zeros((len(W), g.dim))
        rho_min = np.inf
        for m in range(nsub):
            theta = (m + 1) / nsub
            pos = (1 - theta) * pos_a + theta * pos_b
            st = DeformationField(ssp.states[k].grid, pos)
            mask = rasterize_solid(st, g)
            pts = solid_nodes(pos)
            Ps = [interpolation_matrix(g, pts, a) for a in range(g.dim)]
            rho_new, cinfo = continuity_substep(cur, mask, params, dt)
            u_new, minfo = momentum_substep(cur, rho_new, cinfo["fluxes"], mask, params, h, dt, (Ps, W, V))
            ix = _indexer(g)
            uvec = ix.pack(u_new)
            Pu = np.column_stack([P @ uvec[ix.offsets[a] : ix.offsets[a + 1]] for a, P in enumerate(Ps)])
            diff = Pu - V
            acc["viscous"] += minfo["viscous"]
            acc["sink"] += cinfo["sink"]
            acc["damping"] += cinfo["damping"]
            acc["clipped_mass"] += cinfo["clipped_mass"]
            acc["penalty_match"] += dt / (2 * h) * float(np.sum(W[:, None] * diff**2))
            acc["stored"] += dt / (2 * h) * float(np.sum(W[:, None] * Pu**2))
            acc["mismatch_sq"] += dt * float(np.sum(W[:, None] * diff**2))
            for a, P in enumerate(Ps):
                force = -(1.0 / h) * (P.T @ (W * diff[:, a]))
                imp_f[a] += dt * float(np.sum(force))
                imp_s[a] += dt * float(np.sum(W * diff[:, a])) / h
            Usum += dt * Pu
            cur = FluidState(g, rho_new, u_new, t_start + k * Dt + theta * Dt)
            rho_min = min(rho_min, float(rho_new.min()))
            if record_states:
                snapshots.append(cur.copy())
        trace[k] = (Usum / Dt).T.reshape(trace[k].shape)
        pg, pb = potential_energies(cur, params)
        bins.append(
            BinRecord(
                time=cur.time,
                kinetic=kinetic_energy(cur),
                pressure_pot=pg,
                artificial_pot=pb,
                mass=cur.mass(),
                mask_mass=float(np.sum(mask.coverage * cur.rho) * g.cell_volume),
                impulse_fluid=imp_f,
                impulse_solid=imp_s,
                substeps=nsub,
                rho_min=rho_min,
                **acc,
            )
        )
    return FspResult(cur, trace, bins, snapshots)
