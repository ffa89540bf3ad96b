"""Stored elastic energy, viscous dissipation and their regularized forms.

All energies are quadrature sums over solid nodes with trapezoid weights, and
every gradient is the exact gradient of that sum with respect to the nodal
values (the adjoint difference stencils are applied to the pointwise stress).
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .grids import derivative_matrix, partial, partial_adjoint
from .kinematics import cofactor, determinant


class InfiniteEnergyError(ValueError):
    """A gradient was requested where the energy is infinite."""


@dataclass(frozen=True)
class MaterialParams:
    lam: float = 1.0
    mu: float = 1.0
    q: float = 4.0
    a: float = 8.0
    k0: int = 3
    a0: float = 2.0

    def validate(self, d=2):
        errors = []
        if self.lam < 0:
            errors.append(f"lam must be >= 0, got {self.lam}")
        if self.mu <= 0:
            errors.append(f"mu must be > 0, got {self.mu}")
        if self.q <= d:
            errors.append(f"q must exceed the dimension {d}, got {self.q}")
        elif self.a <= d * self.q / (self.q - d):
            errors.append(f"a must exceed d*q/(q-d) = {d * self.q / (self.q - d):g}, got {self.a}")
        if self.k0 < 3:
            errors.append(f"k0 must be >= 3, got {self.k0}")
        if self.a0 <= 0:
            errors.append(f"a0 must be > 0, got {self.a0}")
        if errors:
            raise ValueError("; ".join(errors))
        return self


def _grad(eta, grid):
    return np.stack([partial(eta, grid, b) for b in range(grid.dim)], axis=1)


def _hessian(eta, grid):
    d = grid.dim
    H = np.empty((d, d, d) + grid.shape)
    for b in range(d):
        H[:, b, b] = partial(eta, grid, b, order=2)
        for c in range(b + 1, d):
            H[:, b, c] = partial(partial(eta, grid, c), grid, b)
            H[:, c, b] = H[:, b, c]
    return H


def _grad_adjoint(P, grid):
    """Adjoint of :func:`_grad`: maps a stress ``P[a, b]`` to a nodal covector."""
    return sum(partial_adjoint(P[:, b], grid, b) for b in range(grid.dim))


def _hessian_adjoint(T, grid):
    d = grid.dim
    out = np.zeros((d,) + grid.shape)
    for b in range(d):
        out += partial_adjoint(T[:, b, b], grid, b, order=2)
        for c in range(d):
            if c != b:
                out += partial_adjoint(partial_adjoint(T[:, b, c], grid, b), grid, c)
    return out


def _as_positions(state):
    return state.positions if hasattr(state, "positions") else np.asarray(state)


def _energy_density(eta, grid, mat, with_stress=False):
    d = grid.dim
    F = _grad(eta, grid)
    det = determinant(F)
    if np.any(det <= 0):
        return (np.inf, None, None) if with_stress else np.inf
    G = np.einsum("ka...,kb...->ab...", F, F)
    for i in range(d):
        G[i, i] -= 1.0
    trG = sum(G[i, i] for i in range(d))
    H = _hessian(eta, grid)
    Hn2 = np.sum(H * H, axis=(0, 1, 2))
    dens = 0.5 * mat.lam * trG**2 + mat.mu * np.sum(G * G, axis=(0, 1)) + det ** (-mat.a) + Hn2 ** (mat.q / 2) / mat.q
    if not with_stress:
        return dens
    P = 2 * mat.lam * trG * F + 4 * mat.mu * np.einsum("ak...,kb...->ab...", F, G)
    P -= mat.a * det ** (-mat.a - 1) * cofactor(F)
    T = Hn2 ** ((mat.q - 2) / 2) * H
    return dens, P, T


def elastic_energy(state, mat, grid=None):
    """Discrete stored energy, ``inf`` if the Jacobian is non-positive anywhere."""
    grid = grid or state.grid
    dens = _energy_density(_as_positions(state), grid, mat)
    if np.isscalar(dens):
        return float(dens)
    return float(np.sum(grid.weights() * dens))


def elastic_energy_gradient(state, mat, grid=None):
    grid = grid or state.grid
    dens, P, T = _energy_density(_as_positions(state), grid, mat, with_stress=True)
    if P is None:
        raise InfiniteEnergyError("elastic energy is infinite (non-positive Jacobian)")
    w = grid.weights()
    return _grad_adjoint(w * P, grid) + _hessian_adjoint(w * T, grid)


def elastic_energy_and_gradient(positions, grid, mat):
    dens, P, T = _energy_density(positions, grid, mat, with_stress=True)
    if P is None:
        return np.inf, None
    w = grid.weights()
    return float(np.sum(w * dens)), _grad_adjoint(w * P, grid) + _hessian_adjoint(w * T, grid)


def _strain_rate(eta, vel, grid):
    F = _grad(eta, grid)
    B = _grad(vel, grid)
    S = np.einsum("ai...,aj...->ij...", B, F)
    return F, S + np.swapaxes(S, 0, 1)


def dissipation_rate(state, vel, mat=None, grid=None):
    """``sum w |grad(b)^T F + F^T grad(b)|^2``; ``mat`` is accepted for symmetry."""
    grid = grid or state.grid
    _, S = _strain_rate(_as_positions(state), np.asarray(vel), grid)
    return float(np.sum(grid.weights() * np.sum(S * S, axis=(0, 1))))


def dissipation_gradient(state, vel, mat=None, grid=None):
    """Gradient of :func:`dissipation_rate` in the velocity argument."""
    grid = grid or state.grid
    F, S = _strain_rate(_as_positions(state), np.asarray(vel), grid)
    dB = 4 * np.einsum("ai...,ij...->aj...", F, S)
    return _grad_adjoint(grid.weights() * dB, grid)


@lru_cache(maxsize=16)
def _sobolev_operators(shape, spacing, k0):
    d = len(shape)
    ops = []
    for alpha in itertools.product(range(k0 + 1), repeat=d):
        if sum(alpha) > k0:
            continue
        A = np.ones((1, 1))
        for ax in range(d):
            A = np.kron(A, derivative_matrix(shape[ax], spacing[ax], alpha[ax]))
        ops.append(A)
    stack = np.vstack(ops)
    stack.setflags(write=False)
    return stack


def sobolev_operators(grid, k0):
    """Stacked tensor-product difference operators for every multi-index of order <= k0."""
    return _sobolev_operators(tuple(grid.shape), tuple(grid.spacing), int(k0))


def _stacked_weights(grid, k0):
    A = sobolev_operators(grid, k0)
    w = grid.weights().ravel()
    return np.tile(w, A.shape[0] // w.size)


def sobolev_matrix(grid, k0):
    """Symmetric matrix ``Q`` with ``|eta_a|^2_{k0,2} = eta_a^T Q eta_a`` per component.

    Each multi-index of order at most ``k0`` contributes the weighted square
    of its tensor-product difference operator.
    """
    A = sobolev_operators(grid, k0)
    Q = A.T @ (_stacked_weights(grid, k0)[:, None] * A)
    return 0.5 * (Q + Q.T)


def sobolev_norm_sq(values, grid, k0):
    # sum of weighted squares; forming eta^T Q eta instead loses digits to cancellation
    A = sobolev_operators(grid, k0)
    w = _stacked_weights(grid, k0)
    flat = np.asarray(values).reshape(grid.dim, -1)
    return float(sum(np.sum(w * (A @ v) ** 2) for v in flat))


def sobolev_norm_gradient(values, grid, k0):
    A = sobolev_operators(grid, k0)
    w = _stacked_weights(grid, k0)
    flat = np.asarray(values).reshape(grid.dim, -1)
    return np.stack([2.0 * A.T @ (w * (A @ v)) for v in flat]).reshape(np.shape(values))


def regularized_forms(state, vel, mat, eps, grid=None):
    """Return ``(E_eps, grad E_eps, R_eps, grad_vel R_eps)``.

    ``E_eps = E + eps**a0 |eta|^2`` and ``R_eps = R + eps |vel|^2`` with the
    discrete Sobolev norm of order ``k0``.
    """
    grid = grid or state.grid
    eta = _as_positions(state)
    vel = np.asarray(vel)
    reg = eps**mat.a0 if eps > 0 else 0.0
    E, gE = elastic_energy_and_gradient(eta, grid, mat)
    if gE is None:
        raise InfiniteEnergyError("elastic energy is infinite (non-positive Jacobian)")
    R = dissipation_rate(eta, vel, grid=grid)
    gR = dissipation_gradient(eta, vel, grid=grid)
    if eps > 0:
        E += reg * sobolev_norm_sq(eta, grid, mat.k0)
        gE = gE + reg * sobolev_norm_gradient(eta, grid, mat.k0)
        R += eps * sobolev_norm_sq(vel, grid, mat.k0)
        gR = gR + eps * sobolev_norm_gradient(vel, grid, mat.k0)
    return E, gE, R, gR


def dissipation_hessian(eta, grid):
    """Dense Hessian of ``R(eta, .)``, a quadratic form in the flattened velocity."""
    d = grid.dim
    n = int(np.prod(grid.shape))
    F = _grad(eta, grid).reshape(d, d, n)
    w = grid.weights().ravel()
    Ds = []
    for b in range(d):
        A = np.ones((1, 1))
        for ax in range(d):
            A = np.kron(A, derivative_matrix(grid.shape[ax], grid.spacing[ax], 1 if ax == b else 0))
        Ds.append(A)
    H = np.zeros((d * n, d * n))
    for i in range(d):
        for j in range(d):
            # S_ij = sum_a (F_aj D_i + F_ai D_j) b_a
            L = np.hstack([F[a, j][:, None] * Ds[i] + F[a, i][:, None] * Ds[j] for a in range(d)])
            H += 2.0 * L.T @ (w[:, None] * L)
    return H
