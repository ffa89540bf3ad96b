import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fsisim.contact import (
    ContactParams,
    InfinitePenaltyError,
    SpatialHash,
    brute_force_pairs,
    contact_penalty,
    contact_penalty_gradient,
    contact_terms,
    kappa,
    kappa_eval,
    kappa_growth_constant,
    pair_gradient,
)
from fsisim.diagnostics import fold_fixture
from fsisim.grids import FluidGrid, SolidGrid
from fsisim.kinematics import DeformationField

BOX = FluidGrid((-1.0, -1.0), (2.0, 2.0), (16, 16))


def test_kappa_examples():
    v, d = kappa(np.array([0.5, 1.5, 1.0, 0.0]))
    assert v[0] == 0.5 and d[0] == pytest.approx(-3.0)
    assert v[1] == 0.0 and d[1] == 0.0
    assert v[2] == 0.0 and d[2] == 0.0
    assert v[3] == np.inf
    near = kappa(np.array([1 - 1e-8]))[1][0]
    assert abs(near) < 1e-7


def test_kappa_eval_scales():
    v, d = kappa_eval(0.05, 0.1)
    assert v == pytest.approx(0.5)
    assert d == pytest.approx(-30.0)


def test_kappa_growth_bound_constant_three():
    eps = 0.1
    r = np.linspace(eps / 100, 2 * eps, 20001)
    assert kappa_growth_constant(eps, r) <= 3.0


def test_kappa_convex():
    s = np.linspace(0.01, 3.0, 30001)
    v = kappa(s)[0]
    assert np.all(np.diff(v, 2) >= -1e-12)


def test_separated_solid_has_zero_penalty():
    sg = SolidGrid((-0.25, -0.25), (0.5, 0.5), (9, 9))
    state = DeformationField.identity(sg)
    params = ContactParams(0.1)
    assert contact_penalty(state, BOX, params) == 0.0
    assert np.all(contact_penalty_gradient(state, BOX, params) == 0.0)


def test_single_point_near_wall():
    sg = SolidGrid((-0.25, -0.25), (0.5, 0.5), (5, 5))
    pos = sg.coordinates().copy()
    eps = 0.1
    pos[0, -1, 2] = 1.0 - eps / 2
    state = DeformationField(sg, pos)
    w = sg.weights()[-1, 2]
    assert contact_penalty(state, BOX, ContactParams(eps)) == pytest.approx(0.5 * w, rel=1e-12)


def test_coinciding_admissible_pair_is_infinite():
    sg = SolidGrid((-0.25, -0.25), (0.5, 0.5), (5, 5))
    pos = sg.coordinates().copy()
    pos[:, 0, 0] = pos[:, -1, -1]
    state = DeformationField(sg, pos)
    params = ContactParams(0.1)
    assert contact_penalty(state, BOX, params) == np.inf
    with pytest.raises(InfinitePenaltyError):
        contact_penalty_gradient(state, BOX, params)


def test_pair_counted_twice():
    sg = SolidGrid((-0.25, -0.25), (0.5, 0.5), (5, 5))
    pos = sg.coordinates().copy()
    eps = 0.1
    pos[:, 0, 0] = pos[:, -1, -1] + np.array([eps / 2, 0.0])
    state = DeformationField(sg, pos)
    _, pair, _ = contact_terms(state, BOX, ContactParams(eps))
    w = sg.weights()
    assert pair == pytest.approx(2 * w[0, 0] * w[-1, -1] * 0.5, rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(arrays(float, st.tuples(st.integers(2, 500), st.just(2)), elements=st.floats(-1, 1)), st.floats(0.02, 0.4))
def test_spatial_hash_matches_brute_force(points, radius):
    i, j = SpatialHash(points, radius).pairs_within(radius)
    bi, bj = brute_force_pairs(points, radius)
    assert set(zip(i.tolist(), j.tolist())) == set(zip(bi.tolist(), bj.tolist()))


def test_hash_rejects_radius_larger_than_cell():
    with pytest.raises(ValueError):
        SpatialHash(np.zeros((3, 2)), 0.1).pairs_within(0.2)


def near_contact_ring(seed):
    """Ring closed to a gap below the penalty range, pressed toward a wall."""
    state, _ = fold_fixture(n_angle=33, n_radial=5, span=2 * np.pi * 0.97)
    rng = np.random.default_rng(seed)
    pos = state.positions + np.array([0.35, 0.0])[:, None, None] + 1e-3 * rng.standard_normal(state.positions.shape)
    return DeformationField(state.grid, pos)


@pytest.mark.parametrize("seed", range(2))
def test_gradient_matches_finite_differences(seed):
    state = near_contact_ring(seed)
    params = ContactParams(0.1)
    wall, pair, g = contact_terms(state, BOX, params, with_gradient=True)
    assert wall > 0 and pair > 0
    x = state.positions
    fd = np.zeros_like(x)
    step = 1e-7
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += step
        xm[idx] -= step
        fd[idx] = (contact_penalty(DeformationField(state.grid, xp), BOX, params)
                   - contact_penalty(DeformationField(state.grid, xm), BOX, params)) / (2 * step)
    assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) <= 1e-5


def test_pair_gradient_balances_and_translation():
    state = near_contact_ring(3)
    params = ContactParams(0.1)
    g = pair_gradient(state, BOX, params)
    assert np.any(g != 0)
    np.testing.assert_allclose(g.reshape(2, -1).sum(axis=1), 0.0, atol=1e-9 * np.abs(g).max())
    moved = DeformationField(state.grid, state.positions - np.array([0.1, 0.05])[:, None, None])
    w0, p0, _ = contact_terms(state, BOX, params)
    w1, p1, _ = contact_terms(moved, BOX, params)
    assert p1 == pytest.approx(p0, rel=1e-12)
    assert w1 != pytest.approx(w0)


def test_wall_gradient_points_inward():
    sg = SolidGrid((-0.25, -0.25), (0.5, 0.5), (5, 5))
    pos = sg.coordinates().copy()
    pos[0, -1, 2] = 0.97
    g = contact_penalty_gradient(DeformationField(sg, pos), BOX, ContactParams(0.1))
    # descent direction -g moves the point away from the wall at x = 1
    assert g[0, -1, 2] > 0
