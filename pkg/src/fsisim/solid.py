"""Minimizing-movement time stepping for the solid.

Each substep minimizes

    J(eta) = E_eps(eta) + K_eps(eta) + dt R_eps(eta_k, v) + dt/(2h) |v - U_k|^2_W,
    v = (eta - eta_k) / dt,

with a preconditioned L-BFGS iteration.  The preconditioner is the exact
Hessian of the quadratic part of J (dissipation, regularization and the
velocity-matching term), factored once per substep.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .contact import contact_terms
from .grids import derivative_matrix
from .kinematics import DeformationField, gradient_array, determinant
from .material import (
    dissipation_gradient,
    dissipation_hessian,
    dissipation_rate,
    elastic_energy_and_gradient,
    sobolev_matrix,
    sobolev_norm_gradient,
    sobolev_norm_sq,
)

MACHINE_EPS = np.finfo(float).eps


class OptimizerStall(RuntimeError):
    """The minimizer hit its iteration cap above tolerance."""

    def __init__(self, message, state=None, residual=None, substep=None):
        super().__init__(message)
        self.state = state
        self.residual = residual
        self.substep = substep


@dataclass(frozen=True)
class SspParams:
    h: float
    M: int = 4
    tol: float = 1e-8
    max_iter: int = 1000
    armijo: float = 1e-4
    backtrack: float = 0.5
    memory: int = 12

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError(f"window length h must be > 0, got {self.h}")
        if int(self.M) != self.M or self.M < 1:
            raise ValueError(f"substep count M must be a positive integer, got {self.M}")
        if not self.tol > 0:
            raise ValueError(f"tolerance must be > 0, got {self.tol}")

    @property
    def dt(self):
        return self.h / self.M


@dataclass
class CouplingTrace:
    """Per-substep averaged fluid velocity sampled at the solid nodes."""

    U: np.ndarray
    t0: float
    h: float
    source: str = "initial"

    @property
    def M(self):
        return self.U.shape[0]

    @classmethod
    def constant(cls, velocity, M, t0, h, source="initial"):
        velocity = np.asarray(velocity, dtype=float)
        return cls(np.repeat(velocity[None], M, axis=0), t0, h, source)


@dataclass
class StepReport:
    J_old: float
    J_new: float
    E_old: float
    K_old: float
    E_new: float
    K_new: float
    R: float
    match: float
    U_sq: float
    v_sq: float
    residual: float
    iterations: int
    budget: float

    @property
    def comparison_gap(self):
        """``J(eta_{k+1}) - J(eta_k)``, non-positive for an accepted step."""
        return self.J_new - self.J_old

    @property
    def estimate_gap(self):
        """Left minus right side of the per-step estimate with ``2 dt R``."""
        return self.E_new + self.K_new + 2 * self.R + self.match - (self.E_old + self.K_old + self.U_sq)

    @property
    def ledger_gap(self):
        """As :attr:`estimate_gap` with the stored ``dt/(2h)|v|^2`` term added."""
        return self.estimate_gap + self.v_sq


def lbfgs(fun, x0, apply_h0, gtol, max_iter=1000, memory=12, c1=1e-4, shrink=0.5, f_scale=1.0):
    """Preconditioned L-BFGS with Armijo backtracking.

    ``fun(x)`` returns ``(f, g)`` and may return ``f = inf`` for infeasible
    points, which the line search rejects.  Decreases smaller than a few ulps
    of ``f_scale`` are treated as ties so that the gradient test, not round-off
    in ``f``, decides convergence.  Returns ``(x, f, g, iterations)``; raises
    :class:`OptimizerStall` on failure.
    """
    x = np.array(x0, dtype=float)
    f, g = fun(x)
    if not np.isfinite(f):
        raise OptimizerStall("initial point is infeasible", state=x, residual=np.inf)
    S, Y = [], []
    slack = 64 * MACHINE_EPS * (abs(f_scale) + abs(f))
    it = 0
    while np.linalg.norm(g) > gtol:
        if it >= max_iter:
            raise OptimizerStall(
                f"no convergence after {max_iter} iterations (|grad| = {np.linalg.norm(g):.3e})",
                state=x,
                residual=float(np.linalg.norm(g)),
            )
        it += 1
        d = -_two_loop(g, S, Y, apply_h0)
        slope = g @ d
        if not slope < 0:
            S, Y = [], []
            d = -apply_h0(g)
            slope = g @ d
        accepted = False
        for attempt in range(2):
            alpha = 1.0
            for _ in range(60):
                xn = x + alpha * d
                fn, gn = fun(xn)
                if np.isfinite(fn) and fn <= f + c1 * alpha * slope + slack:
                    accepted = True
                    break
                alpha *= shrink
            if accepted or attempt == 1:
                break
            S, Y = [], []
            d = -apply_h0(g)
            slope = g @ d
        if not accepted:
            raise OptimizerStall(
                f"line search failed (|grad| = {np.linalg.norm(g):.3e})", state=x, residual=float(np.linalg.norm(g))
            )
        s, y = xn - x, gn - g
        if s @ y > 1e-300:
            S.append(s)
            Y.append(y)
            if len(S) > memory:
                S.pop(0)
                Y.pop(0)
        x, f, g = xn, fn, gn
    return x, f, g, it


def _two_loop(g, S, Y, apply_h0):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(S), reversed(Y)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        alphas.append((a, rho))
        q -= a * y
    r = apply_h0(q)
    for (s, y), (a, rho) in zip(zip(S, Y), reversed(alphas)):
        b = rho * (y @ r)
        r += (a - b) * s
    return r


def minimizing_movement(xk, U, dt, h, weights, energy, dissipation, precond, tol, **opts):
    """Generic minimizing-movement substep on flat arrays.

    ``energy(x)`` and ``dissipation(v)`` return ``(value, gradient)``;
    ``weights`` has the shape of ``x`` and defines the velocity-matching norm.
    Returns ``(x_new, info)`` with the quantities needed for the step report.
    """
    xk = np.asarray(xk, dtype=float)
    U = np.asarray(U, dtype=float)
    c = dt / (2 * h)

    # iterate on the displacement: it is small, so its rounding is far below
    # that of the positions, which matters for the stiff regularization terms
    def J(delta):
        E, gE = energy(xk + delta)
        if not np.isfinite(E):
            return np.inf, None
        v = delta / dt
        R, gR = dissipation(v)
        m = v - U
        return E + dt * R + c * np.sum(weights * m * m), gE + gR + weights * m / h

    E0, _ = energy(xk)
    U_sq = c * float(np.sum(weights * U * U))
    J0 = E0 + U_sq
    gtol = tol * (1.0 + abs(J0))
    delta, Jn, g, iters = lbfgs(J, np.zeros_like(xk), precond, gtol, f_scale=J0, **opts)
    x = xk + delta
    v = delta / dt
    E1, _ = energy(x)
    R1, _ = dissipation(v)
    info = dict(
        J_old=J0,
        J_new=Jn,
        E_old=E0,
        E_new=E1,
        R=dt * R1,
        match=c * float(np.sum(weights * (v - U) ** 2)),
        U_sq=U_sq,
        v_sq=c * float(np.sum(weights * v * v)),
        residual=float(np.linalg.norm(g)),
        iterations=iters,
        budget=gtol * float(np.linalg.norm(delta)) + 64 * MACHINE_EPS * (1.0 + abs(J0)),
        velocity=v,
    )
    return x, info


def _block_weights(grid):
    return np.tile(grid.weights().ravel(), grid.dim)


def _stiffness_matrix(grid):
    """``sum_b D_b^T W D_b``, a Laplacian-like scale for the elastic Hessian."""
    n = int(np.prod(grid.shape))
    w = grid.weights().ravel()
    L = np.zeros((n, n))
    for b in range(grid.dim):
        A = np.ones((1, 1))
        for ax in range(grid.dim):
            A = np.kron(A, derivative_matrix(grid.shape[ax], grid.spacing[ax], 1 if ax == b else 0))
        L += A.T @ (w[:, None] * A)
    return L


def _elastic_scale(mat):
    return 2 * mat.lam + 4 * mat.mu + mat.a * (mat.a + 1) * 0.25


class _SolidEnergy:
    """``E_eps + K_eps`` on flattened positions."""

    def __init__(self, grid, mat, eps, contact=None, container=None):
        self.grid, self.mat, self.eps = grid, mat, eps
        self.contact, self.container = contact, container
        self.reg = eps**mat.a0 if eps > 0 else 0.0
        self.shape = (grid.dim, *grid.shape)

    def parts(self, x):
        eta = x.reshape(self.shape)
        E, gE = elastic_energy_and_gradient(eta, self.grid, self.mat)
        if not np.isfinite(E):
            return np.inf, np.inf, None
        if self.reg:
            E += self.reg * sobolev_norm_sq(eta, self.grid, self.mat.k0)
            gE = gE + self.reg * sobolev_norm_gradient(eta, self.grid, self.mat.k0)
        K = 0.0
        if self.contact is not None:
            st = DeformationField(self.grid, eta)
            wall, pair, _ = contact_terms(st, self.container, self.contact)
            K = wall + pair
            if not np.isfinite(K):
                return E, np.inf, None
            _, _, gK = contact_terms(st, self.container, self.contact, with_gradient=True)
            gE = gE + gK
        return E, K, gE.ravel()

    def __call__(self, x):
        E, K, g = self.parts(x)
        if g is None:
            return np.inf, None
        return E + K, g


def _preconditioner(grid, mat, eps, eta_k, dt, h):
    d = grid.dim
    n = int(np.prod(grid.shape))
    Q = sobolev_matrix(grid, mat.k0)
    reg = eps**mat.a0 if eps > 0 else 0.0
    blockQ = np.kron(np.eye(d), Q)
    A = dissipation_hessian(eta_k, grid) / dt
    A += (2 * eps / dt + 2 * reg) * blockQ
    A += np.diag(_block_weights(grid)) / (h * dt)
    A += _elastic_scale(mat) * np.kron(np.eye(d), _stiffness_matrix(grid))
    A = 0.5 * (A + A.T)
    factor = cho_factor(A)
    return lambda r: cho_solve(factor, r)


def mm_step(eta_k, U_k, params, mat, contact=None, container=None, eps=None):
    """One minimizing-movement substep; returns ``(DeformationField, StepReport)``."""
    grid = eta_k.grid
    eps = (contact.eps if contact is not None else 0.0) if eps is None else eps
    dt, h = params.dt, params.h
    energy = _SolidEnergy(grid, mat, eps, contact, container)
    shape = (grid.dim, *grid.shape)
    F_k = eta_k.positions

    def dissipation(v):
        vel = v.reshape(shape)
        R = dissipation_rate(F_k, vel, grid=grid)
        g = dissipation_gradient(F_k, vel, grid=grid)
        if eps > 0:
            R += eps * sobolev_norm_sq(vel, grid, mat.k0)
            g = g + eps * sobolev_norm_gradient(vel, grid, mat.k0)
        return R, g.ravel()

    precond = _preconditioner(grid, mat, eps, F_k, dt, h)
    x, info = minimizing_movement(
        F_k.ravel(),
        np.asarray(U_k).ravel(),
        dt,
        h,
        _block_weights(grid),
        energy,
        dissipation,
        precond,
        params.tol,
        max_iter=params.max_iter,
        memory=params.memory,
        c1=params.armijo,
        shrink=params.backtrack,
    )
    E0, K0, _ = energy.parts(F_k.ravel())
    E1, K1, _ = energy.parts(x)
    report = StepReport(
        J_old=info["J_old"],
        J_new=info["J_new"],
        E_old=E0,
        K_old=K0,
        E_new=E1,
        K_new=K1,
        R=info["R"],
        match=info["match"],
        U_sq=info["U_sq"],
        v_sq=info["v_sq"],
        residual=info["residual"],
        iterations=info["iterations"],
        budget=info["budget"],
    )
    pos = x.reshape(shape)
    vel = info["velocity"].reshape(shape)
    return DeformationField(grid, pos, vel, eta_k.time + dt), report


@dataclass
class SspResult:
    states: list
    velocities: np.ndarray
    reports: list
    t0: float
    dt: float

    def at(self, t):
        """Piecewise-affine interpolant of the positions at time ``t``."""
        k = int(np.clip(np.floor((t - self.t0) / self.dt), 0, len(self.reports) - 1))
        theta = (t - self.t0 - k * self.dt) / self.dt
        a, b = self.states[k].positions, self.states[k + 1].positions
        return (1 - theta) * a + theta * b

    @property
    def final(self):
        return self.states[-1]


def solve_ssp(eta_start, trace, params, mat, contact=None, container=None, eps=None):
    """Chain ``M`` substeps over one window driven by ``trace``."""
    if trace.M != params.M:
        raise ValueError(f"trace has {trace.M} bins, expected {params.M}")
    states = [eta_start]
    reports = []
    for k in range(params.M):
        try:
            nxt, rep = mm_step(states[-1], trace.U[k], params, mat, contact, container, eps)
        except OptimizerStall as exc:
            exc.substep = k
            raise
        states.append(nxt)
        reports.append(rep)
    vel = np.stack([s.velocity for s in states[1:]])
    return SspResult(states, vel, reports, eta_start.time, params.dt)


def rest_state(grid, mat, eps, center=None, tol=1e-9, max_iter=5000):
    """Minimizer of ``E_eps`` reached from the identity (no contact, no motion).

    The result is then translated so that its centroid sits at ``center``.
    Translation leaves every term except the zeroth-order part of the
    regularization unchanged.
    """
    energy = _SolidEnergy(grid, mat, eps)
    n = int(np.prod(grid.shape))
    Q = sobolev_matrix(grid, mat.k0)
    reg = eps**mat.a0 if eps > 0 else 0.0
    A = _elastic_scale(mat) * _stiffness_matrix(grid) + 2 * reg * Q + 1e-3 * np.diag(grid.weights().ravel())
    factor = cho_factor(np.kron(np.eye(grid.dim), 0.5 * (A + A.T)))
    x0 = DeformationField.identity(grid).positions.ravel()
    E0, _ = energy(x0)
    # iterate on the displacement, as in minimizing_movement
    delta, _, _, _ = lbfgs(
        lambda d: energy(x0 + d), np.zeros_like(x0), lambda r: cho_solve(factor, r), tol * (1 + abs(E0)),
        max_iter=max_iter, f_scale=E0,
    )
    x = x0 + delta
    state = DeformationField(grid, x.reshape(grid.dim, *grid.shape))
    if center is not None:
        shift = np.asarray(center, dtype=float) - state.centroid()
        state = state.with_positions(state.positions + shift.reshape((-1,) + (1,) * grid.dim))
    return state


def min_det(state):
    return float(determinant(gradient_array(state.positions, state.grid)).min())
