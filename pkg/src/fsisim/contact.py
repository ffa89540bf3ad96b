"""Soft contact penalty against the container walls and against self-contact.

The pair term is evaluated only for node pairs closer than the penalty range
in the deformed configuration; those pairs are found with a uniform spatial
hash whose cell size equals the range.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np


class InfinitePenaltyError(ValueError):
    """A gradient was requested where the contact penalty is infinite."""


@dataclass(frozen=True)
class ContactParams:
    eps: float
    pair_cutoff: float | None = None

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError(f"contact range eps must be > 0, got {self.eps}")
        if self.pair_cutoff is None:
            object.__setattr__(self, "pair_cutoff", float(np.sqrt(self.eps)))


def kappa(s):
    """Barrier profile ``1/s + s - 2`` on (0, 1), zero beyond, infinite at s <= 0.

    Returns ``(value, derivative)`` arrays.
    """
    s = np.asarray(s, dtype=float)
    val = np.zeros_like(s)
    der = np.zeros_like(s)
    inner = (s > 0) & (s < 1)
    si = s[inner]
    val[inner] = 1.0 / si + si - 2.0
    der[inner] = 1.0 - 1.0 / si**2
    bad = s <= 0
    val[bad] = np.inf
    der[bad] = -np.inf
    return val, der


def kappa_eval(r, eps):
    """``kappa(r / eps)`` and its derivative with respect to ``r``."""
    val, der = kappa(np.asarray(r, dtype=float) / eps)
    return val, der / eps


def kappa_growth_constant(eps, r):
    """Smallest ``c`` with ``|r kappa'(r/eps)| <= c eps (kappa_eps(r) + 1)`` on samples ``r``.

    The derivative here is the profile derivative evaluated at ``r/eps``.
    """
    s = np.asarray(r, dtype=float) / eps
    val, der = kappa(s)
    return float(np.max(np.abs(r * der) / (eps * (val + 1.0))))


class SpatialHash:
    """Uniform bucket grid over a point cloud (points have shape ``(n, d)``)."""

    def __init__(self, points, cell):
        self.points = np.asarray(points, dtype=float)
        self.cell = float(cell)
        keys = np.floor(self.points / self.cell).astype(np.int64)
        self.keys = keys
        self._lo = keys.min(axis=0) - 1
        self._dims = keys.max(axis=0) - self._lo + 2
        flat = self._flat(keys)
        self.order = np.argsort(flat, kind="stable")
        self.sorted_keys = flat[self.order]

    def _flat(self, keys):
        return np.ravel_multi_index(tuple((keys - self._lo).T), tuple(self._dims))

    def buckets(self):
        uniq, start = np.unique(self.sorted_keys, return_index=True)
        return {int(k): self.order[s:e] for k, s, e in zip(uniq, start, np.append(start[1:], len(self.order)))}

    def candidate_pairs(self):
        """All index pairs ``i < j`` sharing a bucket or adjacent buckets."""
        d = self.points.shape[1]
        n = len(self.points)
        out_i, out_j = [], []
        for off in itertools.product((-1, 0, 1), repeat=d):
            nb = self._flat(self.keys + np.array(off))
            lo = np.searchsorted(self.sorted_keys, nb, side="left")
            hi = np.searchsorted(self.sorted_keys, nb, side="right")
            cnt = hi - lo
            if not cnt.any():
                continue
            i = np.repeat(np.arange(n), cnt)
            starts = np.repeat(lo, cnt)
            within = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
            j = self.order[starts + within]
            keep = i < j
            out_i.append(i[keep])
            out_j.append(j[keep])
        if not out_i:
            return np.zeros(0, int), np.zeros(0, int)
        return np.concatenate(out_i), np.concatenate(out_j)

    def pairs_within(self, radius):
        """Pairs ``i < j`` with distance strictly below ``radius`` (``radius <= cell``)."""
        if radius > self.cell * (1 + 1e-12):
            raise ValueError("query radius exceeds the hash cell size")
        i, j = self.candidate_pairs()
        dist = np.linalg.norm(self.points[i] - self.points[j], axis=1)
        keep = dist < radius
        i, j = i[keep], j[keep]
        order = np.lexsort((j, i))
        return i[order], j[order]


def brute_force_pairs(points, radius):
    """Reference O(n^2) enumeration of pairs ``i < j`` closer than ``radius``."""
    points = np.asarray(points, dtype=float)
    diff = points[:, None, :] - points[None, :, :]
    dist = np.sqrt(np.sum(diff**2, axis=-1))
    i, j = np.nonzero(np.triu(dist < radius, k=1))
    return i, j


def _wall_distance_and_normal(points, container):
    """Distance of each point (rows) to the container boundary and its gradient."""
    n, d = points.shape
    lo = np.array(container.origin)
    hi = np.array(container.upper)
    cand = np.concatenate([points - lo, hi - points], axis=1)
    k = np.argmin(cand, axis=1)
    dist = cand[np.arange(n), k]
    normal = np.zeros((n, d))
    axis = k % d
    normal[np.arange(n), axis] = np.where(k < d, 1.0, -1.0)
    return dist, normal


def _flatten(state):
    d = state.grid.dim
    return state.positions.reshape(d, -1).T, state.grid.weights().ravel(), state.grid.coordinates().reshape(d, -1).T


def _active_pairs(pos, ref, params):
    hsh = SpatialHash(pos, params.eps)
    i, j = hsh.pairs_within(params.eps)
    far = np.linalg.norm(ref[i] - ref[j], axis=1) >= params.pair_cutoff
    return i[far], j[far]


def contact_terms(state, container, params, with_gradient=False):
    """Return ``(wall, pair, gradient)``; gradient is ``None`` unless requested."""
    pos, w, ref = _flatten(state)
    dist, normal = _wall_distance_and_normal(pos, container)
    kw, dkw = kappa_eval(dist, params.eps)
    wall = float(np.sum(w * kw)) if np.all(np.isfinite(kw)) else np.inf
    i, j = _active_pairs(pos, ref, params)
    diff = pos[i] - pos[j]
    r = np.linalg.norm(diff, axis=1)
    kp, dkp = kappa_eval(r, params.eps)
    pair = float(2.0 * np.sum(w[i] * w[j] * kp)) if np.all(np.isfinite(kp)) else np.inf
    if not with_gradient:
        return wall, pair, None
    if not (np.isfinite(wall) and np.isfinite(pair)):
        raise InfinitePenaltyError("contact penalty is infinite")
    g = (w * dkw)[:, None] * normal
    f = (2.0 * w[i] * w[j] * dkp / r)[:, None] * diff
    np.add.at(g, i, f)
    np.add.at(g, j, -f)
    return wall, pair, g.T.reshape(state.positions.shape)


def contact_penalty(state, container, params):
    wall, pair, _ = contact_terms(state, container, params)
    return wall + pair


def contact_penalty_gradient(state, container, params):
    return contact_terms(state, container, params, with_gradient=True)[2]


def pair_gradient(state, container, params):
    """Gradient of the pair term alone (sums to zero over nodes)."""
    pos, w, ref = _flatten(state)
    i, j = _active_pairs(pos, ref, params)
    diff = pos[i] - pos[j]
    r = np.linalg.norm(diff, axis=1)
    _, dkp = kappa_eval(r, params.eps)
    g = np.zeros_like(pos)
    f = (2.0 * w[i] * w[j] * dkp / r)[:, None] * diff
    np.add.at(g, i, f)
    np.add.at(g, j, -f)
    return g.T.reshape(state.positions.shape)


def min_wall_distance(state, container):
    pos = state.positions.reshape(state.grid.dim, -1)
    return float(np.min(container.wall_distance(pos)))


def min_self_distance(state, cutoff):
    """Smallest deformed distance among node pairs at reference distance >= cutoff."""
    pos, _, ref = _flatten(state)
    dp = np.sqrt(np.sum((pos[:, None] - pos[None]) ** 2, axis=-1))
    dr = np.sqrt(np.sum((ref[:, None] - ref[None]) ** 2, axis=-1))
    dp = np.where(dr >= cutoff, dp, np.inf)
    return float(dp.min())
