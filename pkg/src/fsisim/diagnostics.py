"""Contact-set classification, interface area, pressure collars and the fat-Cantor profile.

Boundary nodes of the solid are labelled

* ``C`` when their image lies within ``wall_tol`` of the container wall,
* ``N`` when some boundary node with a distinct preimage (reference distance
  at least ``delta_ref``) maps within ``self_tol`` of them,
* ``I`` otherwise (the injective fluid-structure interface).

``C`` takes precedence over ``N``.  The fixtures at the end of the module are
the constructed deformations used by the tests and the ``classify`` command.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .contact import SpatialHash
from .grids import SolidGrid
from .kinematics import DeformationField, DegenerateJacobianError, boundary_loop, cofactor, deformation_gradient, rasterize_solid

LABELS = ("C", "I", "N")


class ResolutionError(ValueError):
    """The sampling grid is too coarse for the requested construction."""


@dataclass
class ContactClassification:
    nodes: np.ndarray  # (k, 2) grid indices of boundary nodes, counter-clockwise
    labels: np.ndarray  # (k,) of "C", "I", "N"
    wall_tol: float
    self_tol: float
    delta_ref: float
    partners: list = field(repr=False, default_factory=list)  # far partners per node (indices into nodes)

    def count(self, label):
        return int(np.count_nonzero(self.labels == label))

    def summary(self):
        return {lab: self.count(lab) for lab in LABELS}


def default_tolerances(grid):
    """``(wall_tol, self_tol, delta_ref)`` scaled by the solid grid spacing."""
    h = float(min(grid.spacing))
    return 0.25 * h, 0.25 * h, 4.0 * float(max(grid.spacing))


def _boundary_points(state):
    nodes = boundary_loop(state.grid)
    pos = state.positions[:, nodes[:, 0], nodes[:, 1]].T
    ref = state.grid.coordinates()[:, nodes[:, 0], nodes[:, 1]].T
    return nodes, pos, ref


def _close_pairs(points, radius):
    """Pairs ``i < j`` at distance ``<= radius`` via the spatial hash."""
    if len(points) < 2:
        return np.zeros(0, int), np.zeros(0, int)
    cell = max(radius, 1e-300)
    i, j = SpatialHash(points, cell).candidate_pairs()
    keep = np.linalg.norm(points[i] - points[j], axis=1) <= radius
    return i[keep], j[keep]


def _far_partners(pos, ref, self_tol, delta_ref):
    i, j = _close_pairs(pos, self_tol)
    far = np.linalg.norm(ref[i] - ref[j], axis=1) >= delta_ref
    i, j = i[far], j[far]
    partners = [[] for _ in range(len(pos))]
    for a, b in zip(i.tolist(), j.tolist()):
        partners[a].append(b)
        partners[b].append(a)
    return [np.array(sorted(p), dtype=int) for p in partners]


def classify_boundary(state, container, wall_tol=None, self_tol=None, delta_ref=None):
    """Label every boundary node of ``state`` as ``C``, ``I`` or ``N``."""
    dw, ds, dr = default_tolerances(state.grid)
    wall_tol = dw if wall_tol is None else wall_tol
    self_tol = ds if self_tol is None else self_tol
    delta_ref = dr if delta_ref is None else delta_ref
    nodes, pos, ref = _boundary_points(state)
    partners = _far_partners(pos, ref, self_tol, delta_ref)
    wall = container.wall_distance(pos.T) <= wall_tol
    labels = np.full(len(nodes), "I")
    labels[np.array([len(p) > 0 for p in partners], dtype=bool)] = "N"
    labels[wall] = "C"
    return ContactClassification(nodes, labels, float(wall_tol), float(self_tol), float(delta_ref), partners)


def _face_quadrature(grid):
    """Per-face lists of ``(node indices, weights, outward normal)`` on the reference boundary."""
    n0, n1 = grid.shape
    h0, h1 = grid.spacing
    w0 = np.full(n0, h0)
    w0[[0, -1]] *= 0.5
    w1 = np.full(n1, h1)
    w1[[0, -1]] *= 0.5
    i0, i1 = np.arange(n0), np.arange(n1)
    return [
        ((i0, np.zeros(n0, int)), w0, np.array([0.0, -1.0])),
        ((np.full(n1, n0 - 1), i1), w1, np.array([1.0, 0.0])),
        ((i0, np.full(n0, n1 - 1)), w0, np.array([0.0, 1.0])),
        ((np.zeros(n1, int), i1), w1, np.array([-1.0, 0.0])),
    ]


def interface_area(state, classification, labels=("I",)):
    """Trapezoid sum of ``det F |F^{-T} n| = |cof(F) n|`` over boundary nodes with the given labels."""
    F, det, min_det = deformation_gradient(state)
    if not min_det > 0:
        raise DegenerateJacobianError(f"minimum Jacobian {min_det:.3e} is not positive")
    cof = cofactor(F.values)
    lab = {tuple(n): l for n, l in zip(classification.nodes.tolist(), classification.labels.tolist())}
    total = 0.0
    for (ii, jj), w, normal in _face_quadrature(state.grid):
        keep = np.array([lab[(a, b)] in labels for a, b in zip(ii.tolist(), jj.tolist())])
        if not keep.any():
            continue
        c = cof[:, :, ii, jj]
        stretch = np.linalg.norm(np.einsum("abk,b->ak", c, normal), axis=0)
        total += float(np.sum((w * stretch)[keep]))
    return total


@dataclass
class ClaimResult:
    name: str
    passed: bool
    witness: tuple | None = None
    detail: str = ""


@dataclass
class LemmaReport:
    claims: list
    multiplicity: np.ndarray

    @property
    def passed(self):
        return all(c.passed for c in self.claims)

    def claim(self, name):
        return next(c for c in self.claims if c.name == name)


def _cluster_count(ids, ref, delta_ref):
    """Number of groups among reference points ``ref[ids]`` that are mutually ``delta_ref`` apart."""
    reps = []
    for k in ids:
        if all(np.linalg.norm(ref[k] - ref[r]) >= delta_ref for r in reps):
            reps.append(k)
    return reps


def lemma_checks(state, classification):
    """Injectivity on ``C``, multiplicity at most two on ``N`` and the label partition."""
    c = classification
    nodes, pos, ref = _boundary_points(state)
    claims = []

    # injectivity on the wall-contact set
    idx = np.flatnonzero(c.labels == "C")
    i, j = _close_pairs(pos[idx], c.self_tol)
    far = np.linalg.norm(ref[idx[i]] - ref[idx[j]], axis=1) >= c.delta_ref
    if far.any():
        k = int(np.flatnonzero(far)[0])
        claims.append(ClaimResult("c_injective", False, (int(idx[i[k]]), int(idx[j[k]])), "two wall-contact nodes share an image"))
    else:
        claims.append(ClaimResult("c_injective", True))

    # every self-contact image point has at most two distinct preimages
    mult = np.ones(len(nodes), dtype=int)
    witness = None
    for k in np.flatnonzero(c.labels == "N"):
        reps = _cluster_count(c.partners[k].tolist(), ref, c.delta_ref)
        mult[k] = 1 + len(reps)
        if len(reps) >= 2 and witness is None:
            witness = (int(k), int(reps[0]), int(reps[1]))
    if witness is None:
        claims.append(ClaimResult("multiplicity_at_most_two", True, detail=f"max multiplicity {int(mult.max())}"))
    else:
        claims.append(ClaimResult("multiplicity_at_most_two", False, witness, f"max multiplicity {int(mult.max())}"))

    # the three labels partition the boundary
    sets = [set(np.flatnonzero(c.labels == lab).tolist()) for lab in LABELS]
    disjoint = all(not (sets[a] & sets[b]) for a in range(3) for b in range(a + 1, 3))
    complete = set().union(*sets) == set(range(len(nodes)))
    claims.append(ClaimResult("partition", disjoint and complete))
    return LemmaReport(claims, mult)


def _segment_distance(points, a, b):
    """Distance from points ``(n, 2)`` to the segments ``a[k] b[k]``, minimised over ``k``."""
    ab = b - a
    len2 = np.maximum(np.sum(ab * ab, axis=1), 1e-300)
    out = np.full(len(points), np.inf)
    for s in range(0, len(a), 64):
        ap = points[:, None, :] - a[None, s : s + 64]
        t = np.clip(np.sum(ap * ab[None, s : s + 64], axis=2) / len2[None, s : s + 64], 0.0, 1.0)
        d = np.linalg.norm(ap - t[..., None] * ab[None, s : s + 64], axis=2)
        out = np.minimum(out, d.min(axis=1))
    return out


def fluid_boundary_distance(fluid_grid, state):
    """Distance from each cell centre to the container wall or the deformed solid boundary."""
    c = fluid_grid.centers()
    pts = c.reshape(2, -1).T
    loop = boundary_loop(state.grid)
    poly = state.positions[:, loop[:, 0], loop[:, 1]].T
    d_solid = _segment_distance(pts, poly, np.roll(poly, -1, axis=0))
    return np.minimum(fluid_grid.wall_distance(c), d_solid.reshape(fluid_grid.shape))


def collar_pressure_profile(fluid, state, widths, params):
    """``int (rho^gamma + eps rho^beta)`` over fluid cells within each width of the fluid boundary.

    Cells are weighted by their uncovered fraction, so the solid interior does
    not contribute.  The result is non-decreasing in the width.
    """
    g = fluid.grid
    dist = fluid_boundary_distance(g, state)
    free = 1.0 - rasterize_solid(state, g).coverage
    p = fluid.rho**params.gamma + params.eps * fluid.rho**params.beta
    dens = free * p * g.cell_volume
    return np.array([float(np.sum(dens[dist < w])) for w in widths])


@dataclass
class CantorProfile:
    levels: int
    resolution: int
    widths: np.ndarray
    amplitudes: np.ndarray
    intervals: np.ndarray  # (m, 2) supports of all bumps
    x: np.ndarray
    f: np.ndarray
    positive_measure: float
    complement_measure: float
    positive_measure_exact: float

    @property
    def sampled_positive_fraction(self):
        return float(np.mean(self.f > 0))


def bump(s):
    """Smooth bump ``exp(1 - 1/(1 - s^2))`` on (-1, 1), zero outside, peak 1."""
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = np.abs(s) < 1
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - s[inside] ** 2))
    return out


def cantor_intervals(levels):
    """Bump supports: level ``k`` places ``2^k`` intervals of width ``4^-(k+1)`` in the gap centres."""
    gaps = [(0.0, 1.0)]
    out = []
    for k in range(levels):
        w = 4.0 ** -(k + 1)
        new_gaps = []
        for a, b in gaps:
            m = 0.5 * (a + b)
            out.append((m - 0.5 * w, m + 0.5 * w))
            new_gaps += [(a, m - 0.5 * w), (m + 0.5 * w, b)]
        gaps = new_gaps
    return np.array(out)


def _covered_length_per_cell(intervals, n):
    """Length of ``[0, 1]`` cell ``i`` (width ``1/n``) covered by the disjoint intervals."""
    out = np.zeros(n)
    a, b = intervals[:, 0] * n, intervals[:, 1] * n
    ia = np.floor(a).astype(int)
    ib = np.minimum(np.floor(b).astype(int), n - 1)
    same = ia == ib
    np.add.at(out, ia[same], (b - a)[same])
    split = ~same
    np.add.at(out, ia[split], (ia + 1 - a)[split])
    np.add.at(out, ib[split], (b - ib)[split])
    for lo, hi in zip(ia[split] + 1, ib[split]):
        out[lo:hi] += 1.0
    return out / n


def fat_cantor_profile(levels, resolution):
    """Sample the fat-Cantor bump profile on ``resolution`` cells of [0, 1].

    The measure of ``{f > 0}`` is accumulated cell by cell from the bump
    supports.  Raises :class:`ResolutionError` if the gaps between level
    ``levels`` supports are narrower than two cells, which would merge bumps
    on the grid.
    """
    levels, resolution = int(levels), int(resolution)
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    iv = cantor_intervals(levels)
    ends = np.sort(iv.ravel())
    gaps = np.diff(np.concatenate([[0.0], ends, [1.0]]))[::2]
    if gaps.min() * resolution < 2:
        raise ResolutionError(
            f"{resolution} cells cannot separate level {levels}: smallest gap is {gaps.min():.3e}"
        )
    widths = 4.0 ** -(np.arange(levels) + 1.0)
    amps = 2.0 ** -np.arange(levels, dtype=float)
    x = (np.arange(resolution) + 0.5) / resolution
    f = np.zeros(resolution)
    k = 0
    for lev in range(levels):
        for _ in range(2**lev):
            a, b = iv[k]
            lo, hi = int(np.floor(a * resolution)), int(np.ceil(b * resolution))
            m, r = 0.5 * (a + b), 0.5 * (b - a)
            f[lo:hi] += amps[lev] * bump((x[lo:hi] - m) / r)
            k += 1
    pos = float(np.sum(_covered_length_per_cell(iv, resolution)))
    exact = 0.5 * (1.0 - 2.0**-levels)
    return CantorProfile(levels, resolution, widths, amps, iv, x, f, pos, 1.0 - pos, exact)


# fixtures


def separated_fixture(resolution=17):
    """Unit square solid centred in a 2x2 container, identity map."""
    from .grids import FluidGrid

    grid = SolidGrid((-0.5, -0.5), (1.0, 1.0), (resolution, resolution))
    return DeformationField.identity(grid), FluidGrid((-1.0, -1.0), (2.0, 2.0), (32, 32))


def wall_flush_fixture(resolution=17):
    """The separated square translated so its face ``x = -0.5`` sits on the wall ``x = -1``."""
    state, container = separated_fixture(resolution)
    return DeformationField.affine(state.grid, np.eye(2), (-0.5, 0.0)), container


def fold_fixture(n_angle=65, n_radial=9, inner=0.3, outer=0.6, span=2 * np.pi):
    """Strip bent into a ring; with ``span = 2 pi`` the two end faces coincide.

    ``eta(s, r) = r (cos(span s), -sin(span s))`` on ``[0, 1] x [inner, outer]``
    has Jacobian ``span * r > 0``.  A span above ``2 pi`` makes the ends
    overlap by an annular sector of area ``(span - 2 pi) (outer^2 - inner^2) / 2``.
    """
    from .grids import FluidGrid

    grid = SolidGrid((0.0, inner), (1.0, outer - inner), (n_angle, n_radial))
    s, r = grid.coordinates()
    pos = np.stack([r * np.cos(span * s), -r * np.sin(span * s)])
    return DeformationField(grid, pos), FluidGrid((-1.0, -1.0), (2.0, 2.0), (32, 32))


def fold_overlap_area(inner=0.3, outer=0.6, span=2 * np.pi):
    return max(0.0, span - 2 * np.pi) * (outer**2 - inner**2) / 2


def triple_point_fixture(n_x=17, n_y=33, layers=4, height=0.2):
    """Adversarial accordion: the strip is folded ``layers`` times onto one band.

    The side faces are stacked ``layers`` deep, so image points there have
    more than two boundary preimages.  The map reverses orientation on every
    other layer, so the solvers can never produce it.
    """
    from .grids import FluidGrid

    grid = SolidGrid((-0.5, 0.0), (1.0, 1.0), (n_x, n_y))
    x, y = grid.coordinates()
    t = y * layers
    k = np.floor(np.minimum(t, layers - 1e-12))
    frac = t - k
    up = (k % 2) == 0
    z = height * np.where(up, frac, 1.0 - frac)
    return DeformationField(grid, np.stack([x, z])), FluidGrid((-1.0, -1.0), (2.0, 2.0), (32, 32))
