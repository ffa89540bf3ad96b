"""Coupled time stepping, scenario presets and the global energy ledger.

Each window ``[nh, (n+1)h]`` first advances the solid with the fluid velocity
trace recorded in the previous window (the time-delayed coupling; window 0
uses the initial solid velocity), then advances the fluid with the new solid
trajectory, which produces the trace for the next window.
"""
from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .contact import ContactParams, contact_terms, min_wall_distance
from .fluid import FluidParams, FluidState, kinetic_energy, potential_energies, solve_fsp
from .grids import FluidGrid, SolidGrid
from .kinematics import DeformationField, deformation_gradient, rasterize_solid
from .material import MaterialParams
from .solid import CouplingTrace, OptimizerStall, SspParams, rest_state, solve_ssp

LEDGER_COLUMNS = (
    "time",
    "kinetic_fluid",
    "pressure_pot",
    "artificial_pot",
    "visc_diss_cum",
    "kinetic_solid",
    "E",
    "K",
    "R_cum",
    "penalty_match_cum",
    "penalty_U_cum",
    "sink_work_cum",
    "damping_work_cum",
    "total",
    "violation",
)
CUMULATIVE_COLUMNS = (
    "visc_diss_cum",
    "R_cum",
    "penalty_match_cum",
    "penalty_U_cum",
    "sink_work_cum",
    "damping_work_cum",
)
PRESETS = ("quiescent", "falling-disk", "wall-impact")


class PullInFailure(ValueError):
    """The pull-in map is not injective for the requested range."""


class SchemeFailure(RuntimeError):
    """A sub-solver failed; carries the window index and the partial result."""

    def __init__(self, message, window, partial):
        super().__init__(message)
        self.window = window
        self.partial = partial


@dataclass
class SchemeParams:
    """Every knob of a run; flat so that it maps one-to-one onto config keys."""

    preset: str = "quiescent"
    T: float = 0.1
    N: int = 10
    eps: float = 0.05
    varsigma: float = 1e-3
    gamma: float = 2.0
    beta: float = 4.0
    mu: float = 0.1
    zeta: float = 0.1
    cfl: float = 0.4
    viscosity_region: str = "fluid"
    M: int = 4
    tol: float = 1e-8
    max_iter: int = 1000
    lam_e: float = 1.0
    mu_e: float = 1.0
    q: float = 4.0
    a: float = 8.0
    k0: int = 3
    a0: float = 2.0
    seed: int = 0
    container_size: float = 2.0
    fluid_resolution: int = 64
    solid_resolution: int = 17
    solid_size: float = 0.5
    rho_ref: float = 0.5
    center_x: float = 0.0
    center_y: float = 0.0
    speed: float = 0.0
    perturbation: float = 0.0

    @property
    def h(self):
        return self.T / self.N

    def validate(self):
        """Raise ``ValueError`` listing every violation; return warnings."""
        errors = []
        if self.preset not in PRESETS:
            errors.append(f"unknown preset {self.preset!r}; choose one of {', '.join(PRESETS)}")
        if not self.T > 0:
            errors.append(f"T must be > 0, got {self.T}")
        if int(self.N) != self.N or self.N < 1:
            errors.append(f"N must be a positive integer, got {self.N}")
        if not self.eps > 0:
            errors.append(f"eps must be > 0, got {self.eps}")
        if not self.varsigma > 0:
            errors.append(f"varsigma must be > 0, got {self.varsigma}")
        if self.rho_ref < 0:
            errors.append(f"rho_ref must be >= 0, got {self.rho_ref}")
        if self.fluid_resolution < 8:
            errors.append(f"fluid_resolution must be >= 8, got {self.fluid_resolution}")
        if self.solid_resolution < 5:
            errors.append(f"solid_resolution must be >= 5, got {self.solid_resolution}")
        half = 0.5 * self.container_size
        reach = 0.5 * self.solid_size * 1.2
        if abs(self.center_x) + reach >= half or abs(self.center_y) + reach >= half:
            errors.append("the solid must lie strictly inside the container")
        notes = []
        checks = [self.fluid_params().validate, self._validate_material]
        if self.T > 0 and int(self.N) == self.N and self.N >= 1:
            checks.append(self.ssp_params)
        for check in checks:
            try:
                out = check()
                if isinstance(out, list):
                    notes.extend(out)
            except ValueError as exc:
                errors.append(str(exc))
        if errors:
            raise ValueError("; ".join(errors))
        return notes

    def _validate_material(self):
        try:
            self.material().validate(2)
        except ValueError as exc:
            # the material fields carry an _e suffix here
            parts = [re.sub(r"^(lam|mu) ", r"\1_e ", p) for p in str(exc).split("; ")]
            raise ValueError("; ".join(parts)) from None

    def fluid_params(self):
        return FluidParams(self.gamma, self.beta, self.mu, self.zeta, self.eps, self.varsigma, self.cfl, self.viscosity_region)

    def ssp_params(self):
        return SspParams(self.h, self.M, self.tol, self.max_iter)

    def material(self):
        return MaterialParams(self.lam_e, self.mu_e, self.q, self.a, self.k0, self.a0)

    def contact(self):
        return ContactParams(self.eps)

    def fluid_grid(self):
        L = self.container_size
        n = self.fluid_resolution
        return FluidGrid((-L / 2, -L / 2), (L, L), (n, n))

    def solid_grid(self):
        s = self.solid_size
        n = self.solid_resolution
        return SolidGrid((-s / 2, -s / 2), (s, s), (n, n))


PRESET_DEFAULTS = {
    "quiescent": dict(T=0.1, N=10, center_x=0.0, center_y=0.0, speed=0.0),
    "falling-disk": dict(T=0.5, N=50, center_x=0.0, center_y=0.3, speed=0.5),
    "wall-impact": dict(T=0.3, N=30, center_x=0.0, center_y=-0.6, speed=1.0, eps=0.05),
}


def preset_params(name, **overrides):
    """Scheme parameters for a named preset with keyword overrides."""
    if name not in PRESET_DEFAULTS:
        raise ValueError(f"unknown preset {name!r}; choose one of {', '.join(PRESETS)}")
    values = dict(PRESET_DEFAULTS[name])
    values.update(overrides)
    return SchemeParams(preset=name, **values)


def _evaluate_bilinear(state, X):
    """Bilinear interpolant at many reference points ``X`` (shape ``(2, n)``)."""
    g = state.grid
    u = (X - np.array(g.origin)[:, None]) / np.array(g.spacing)[:, None]
    idx = np.clip(np.floor(u).astype(int), 0, np.array(g.shape)[:, None] - 2)
    s, t = u - idx
    i, j = idx
    p = state.positions
    return (
        (1 - s) * (1 - t) * p[:, i, j]
        + s * (1 - t) * p[:, i + 1, j]
        + (1 - s) * t * p[:, i, j + 1]
        + s * t * p[:, i + 1, j + 1]
    )


def pull_in_initial(eta0, eps, normal, cutoff):
    """Compose ``eta0`` with ``X -> X - eps * normal(X) * cutoff(X)``.

    ``normal`` maps reference coordinates ``(d, *shape)`` to an outward unit
    field of the same shape and ``cutoff`` to a scalar field in [0, 1].
    """
    g = eta0.grid
    if eps == 0:
        return DeformationField(g, eta0.positions.copy(), eta0.velocity.copy(), eta0.time)
    X = g.coordinates()
    shift = eps * np.asarray(normal(X)) * np.asarray(cutoff(X))[None]
    phi = X - shift
    _, _, min_det = deformation_gradient(DeformationField(g, phi))
    lo = np.array(g.origin).reshape((-1,) + (1,) * g.dim)
    hi = lo + np.array(g.extent).reshape((-1,) + (1,) * g.dim)
    tol = 1e-12 * max(g.extent)
    if not min_det > 0 or np.any(phi < lo - tol) or np.any(phi > hi + tol):
        raise PullInFailure(f"pull-in map with eps = {eps} is not injective into the reference domain")
    moved = np.any(shift != 0, axis=0)
    pos = eta0.positions.copy()
    pts = np.clip(phi[:, moved], lo.reshape(-1, 1), hi.reshape(-1, 1))
    pos[:, moved] = _evaluate_bilinear(eta0, pts)
    return DeformationField(g, pos, eta0.velocity.copy(), eta0.time)


def face_pull_in(grid, axis, side, width):
    """Normal and cutoff callables pulling one reference face inward.

    ``side`` is -1 for the lower face along ``axis`` and +1 for the upper one;
    the cutoff decays linearly to zero at reference distance ``width``.
    """
    lo = grid.origin[axis]
    hi = lo + grid.extent[axis]

    def normal(X):
        n = np.zeros_like(X)
        n[axis] = side
        return n

    def cutoff(X):
        dist = X[axis] - lo if side < 0 else hi - X[axis]
        return np.clip(1.0 - dist / width, 0.0, 1.0)

    return normal, cutoff


def initial_density(mask, rho_ref, total_mass=None, smoothing=1.5):
    """Mollified fluid-region indicator, exactly zero on the solid footprint."""
    solid = mask.coverage > 0
    ind = gaussian_filter((~solid).astype(float), smoothing, mode="nearest")
    rho = rho_ref * np.where(solid, 0.0, ind)
    if total_mass is not None and rho.sum() > 0:
        rho *= total_mass / (rho.sum() * mask.grid.cell_volume)
    return rho


def initial_data(params):
    """Solid and fluid initial states for the configured preset."""
    sg, fg = params.solid_grid(), params.fluid_grid()
    eta = rest_state(sg, params.material(), params.eps, center=(params.center_x, params.center_y))
    v0 = np.zeros_like(eta.positions)
    if params.preset in ("falling-disk", "wall-impact"):
        v0[1] = -params.speed
    if params.perturbation:
        rng = np.random.default_rng(params.seed)
        v0 = v0 + params.perturbation * rng.standard_normal(v0.shape)
    eta = DeformationField(sg, eta.positions, v0, 0.0)
    mask = rasterize_solid(eta, fg)
    rho = initial_density(mask, params.rho_ref)
    return eta, FluidState(fg, rho, None, 0.0)


@dataclass
class EnergyLedger:
    rows: list = field(default_factory=list)

    def append(self, **values):
        self.rows.append({c: float(values.get(c, 0.0)) for c in LEDGER_COLUMNS})

    def column(self, name):
        return np.array([r[name] for r in self.rows])

    def cumulative(self):
        return sum(self.column(c) for c in CUMULATIVE_COLUMNS)

    def __len__(self):
        return len(self.rows)


def default_budget(params, substeps):
    """Per-row tolerance as a fraction of the initial total."""
    return 1e-6 + params.M * params.tol + np.asarray(substeps) * 1e-10


def ledger_check(ledger, budget):
    """Indices of rows with ``total + cumulative > total(0) + budget``.

    ``budget`` is an absolute allowance, a scalar or one value per row.
    """
    if len(ledger) == 0:
        return []
    total = ledger.column("total")
    excess = total + ledger.cumulative() - total[0] - np.broadcast_to(np.asarray(budget, dtype=float), total.shape)
    return [int(i) for i in np.flatnonzero(excess > 0)]


def coupling_mismatch(U, V, weights):
    """Per-window RMS over substeps of ``|U_k - V_k|_W``.

    ``U`` and ``V`` have shape ``(windows, M, d, *solid_shape)``.
    """
    U = np.asarray(U, dtype=float)
    V = np.asarray(V, dtype=float)
    w = np.asarray(weights)
    diff = U - V
    sq = np.sum(w * np.sum(diff**2, axis=2), axis=tuple(range(2, diff.ndim - 1)))
    return np.sqrt(np.mean(sq, axis=1))


@dataclass
class RunResult:
    params: SchemeParams
    ledger: EnergyLedger
    snapshots: list
    traces: list
    solid_velocities: list
    step_reports: list
    stats: dict

    def series(self, name):
        return np.asarray(self.stats[name])


def _solid_energy(state, params, contact, container):
    from .solid import _SolidEnergy

    E, K, _ = _SolidEnergy(state.grid, params.material(), params.eps, contact, container).parts(state.positions.ravel())
    return E, K


def run_scheme(params, snapshot_every=1, initial=None):
    """Run the coupled scheme; returns a :class:`RunResult`.

    On a sub-solver failure a :class:`SchemeFailure` carrying the partial
    result is raised.
    """
    params.validate()
    eta, fluid = initial if initial is not None else initial_data(params)
    fp, sp_, mat, cp = params.fluid_params(), params.ssp_params(), params.material(), params.contact()
    container = params.fluid_grid()
    W = eta.grid.weights()
    M, h = params.M, params.h

    ledger = EnergyLedger()
    stats = {k: [] for k in ("time", "mass", "mask_mass", "min_wall_distance", "min_det", "K", "rho_min", "clipped_mass",
                              "mismatch_sq", "impulse_fluid", "impulse_solid", "substeps", "centroid", "trace_source",
                              "estimate_gap", "comparison_gap", "ledger_gap", "step_budget")}
    snapshots = [(0.0, eta, fluid.copy())]
    traces, solid_vel, reports = [], [], []
    result = RunResult(params, ledger, snapshots, traces, solid_vel, reports, stats)

    trace = CouplingTrace.constant(eta.velocity, M, 0.0, h, source="initial")
    E0, K0 = _solid_energy(eta, params, cp, container)
    pg, pb = potential_energies(fluid, fp)
    kin_solid0 = sum(r for r in [M * (sp_.dt / (2 * h)) * float(np.sum(W * eta.velocity**2))])
    total0 = kinetic_energy(fluid) + pg + pb + kin_solid0 + E0 + K0
    ledger.append(time=0.0, kinetic_fluid=kinetic_energy(fluid), pressure_pot=pg, artificial_pot=pb,
                  kinetic_solid=kin_solid0, E=E0, K=K0, total=total0)
    _, _, md = deformation_gradient(eta)
    _record(stats, 0.0, fluid, rasterize_solid(eta, container), eta, container, md, K0)
    cum = dict.fromkeys(CUMULATIVE_COLUMNS, 0.0)
    substeps = 0
    for n in range(params.N):
        expected = "initial" if n == 0 else f"window-{n - 1}"
        if trace.source != expected:
            raise RuntimeError(f"window {n} received trace from {trace.source}, expected {expected}")
        stats["trace_source"].append(trace.source)
        try:
            ssp = solve_ssp(eta, trace, sp_, mat, cp, container, params.eps)
        except OptimizerStall as exc:
            raise SchemeFailure(f"solid solver failed in window {n}, substep {exc.substep}: {exc}", n, result) from exc
        try:
            fsp = solve_fsp(fluid, ssp, fp, h, W)
        except (RuntimeError, ValueError) as exc:
            raise SchemeFailure(f"fluid solver failed in window {n}: {exc}", n, result) from exc
        consumed = [r.U_sq for r in ssp.reports]
        stored = [b.stored for b in fsp.bins]
        for k, (rep, b) in enumerate(zip(ssp.reports, fsp.bins)):
            substeps += 1 + b.substeps
            cum["visc_diss_cum"] += b.viscous
            cum["R_cum"] += 2 * rep.R
            cum["penalty_match_cum"] += b.penalty_match
            cum["penalty_U_cum"] += rep.match
            cum["sink_work_cum"] += b.sink
            cum["damping_work_cum"] += b.damping
            kin_solid = sum(consumed[k + 1 :]) + sum(stored[: k + 1])
            total = b.kinetic + b.pressure_pot + b.artificial_pot + kin_solid + rep.E_new + rep.K_new
            budget = default_budget(params, substeps) * total0
            violation = max(0.0, total + sum(cum.values()) - total0 - budget)
            ledger.append(time=b.time, kinetic_fluid=b.kinetic, pressure_pot=b.pressure_pot,
                          artificial_pot=b.artificial_pot, kinetic_solid=kin_solid, E=rep.E_new, K=rep.K_new,
                          total=total, violation=violation, **cum)
            st = ssp.states[k + 1]
            stats["time"].append(b.time)
            stats["mass"].append(b.mass)
            stats["mask_mass"].append(b.mask_mass)
            stats["min_wall_distance"].append(min_wall_distance(st, container))
            stats["min_det"].append(deformation_gradient(st)[2])
            stats["K"].append(rep.K_new)
            stats["rho_min"].append(b.rho_min)
            stats["clipped_mass"].append(b.clipped_mass)
            stats["mismatch_sq"].append(b.mismatch_sq)
            stats["impulse_fluid"].append(b.impulse_fluid)
            stats["impulse_solid"].append(b.impulse_solid)
            stats["substeps"].append(b.substeps)
            stats["centroid"].append(st.centroid())
            stats["estimate_gap"].append(rep.estimate_gap)
            stats["comparison_gap"].append(rep.comparison_gap)
            stats["ledger_gap"].append(rep.ledger_gap)
            stats["step_budget"].append(rep.budget)
        reports.extend(ssp.reports)
        traces.append(CouplingTrace(fsp.trace, n * h, h, source=f"window-{n}"))
        solid_vel.append(ssp.velocities)
        trace = traces[-1]
        eta = ssp.final
        fluid = fsp.state
        if snapshot_every and (n + 1) % snapshot_every == 0:
            snapshots.append((fluid.time, eta, fluid.copy()))
    return result


def _record(stats, t, fluid, mask, eta, container, min_det, K):
    stats["time"].append(t)
    stats["mass"].append(fluid.mass())
    stats["mask_mass"].append(float(np.sum(mask.coverage * fluid.rho) * fluid.grid.cell_volume))
    stats["min_wall_distance"].append(min_wall_distance(eta, container))
    stats["min_det"].append(min_det)
    stats["K"].append(K)
    stats["rho_min"].append(float(fluid.rho.min()))
    stats["clipped_mass"].append(0.0)
    stats["mismatch_sq"].append(0.0)
    stats["impulse_fluid"].append(np.zeros(2))
    stats["impulse_solid"].append(np.zeros(2))
    stats["substeps"].append(0)
    stats["centroid"].append(eta.centroid())


def replace(params, **changes):
    return dataclasses.replace(params, **changes)
