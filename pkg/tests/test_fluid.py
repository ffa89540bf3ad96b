from types import SimpleNamespace

import numpy as np
import pytest

from fsisim.fluid import (
    CFLViolation,
    FluidParams,
    FluidState,
    continuity_substep,
    interpolation_matrix,
    kinetic_energy,
    max_stable_dt,
    momentum_substep,
    potential_energies,
    pressure,
    solve_fsp,
    _indexer,
)
from fsisim.grids import FluidGrid, SolidGrid
from fsisim.kinematics import DeformationField, SolidMask

GRID = FluidGrid((-1.0, -1.0), (2.0, 2.0), (16, 16))


def full_mask(grid):
    return SolidMask(grid, np.ones(grid.shape), np.ones(grid.shape))


def swirling_state(grid, amp=0.2, seed=0):
    rng = np.random.default_rng(seed)
    x, y = grid.centers()
    rho = 1.0 + 0.1 * np.sin(np.pi * x) * np.cos(np.pi * y)
    u = [amp * rng.standard_normal(grid.face_shape(a)) for a in range(grid.dim)]
    for a in range(grid.dim):
        idx = [slice(None)] * grid.dim
        idx[a] = 0
        u[a][tuple(idx)] = 0.0
        idx[a] = -1
        u[a][tuple(idx)] = 0.0
    return FluidState(grid, rho, u)


def test_params_validation():
    FluidParams().validate()
    with pytest.raises(ValueError):
        FluidParams(beta=3.0).validate()
    with pytest.raises(ValueError):
        FluidParams(mu=0.0).validate()
    with pytest.warns(UserWarning):
        FluidParams(gamma=1.5).validate()


def test_pressure_example():
    assert pressure(2.0, FluidParams(gamma=2.0, beta=4.0, eps=0.1)) == pytest.approx(5.6)


def test_pressure_potential_example():
    st = FluidState(GRID, np.ones(GRID.shape), None)
    pg, pb = potential_energies(st, FluidParams(gamma=2.0, eps=0.0))
    assert pg == pytest.approx(4.0, rel=1e-14)
    assert pb == 0.0


def test_continuity_quiescent_unchanged():
    st = FluidState(GRID, np.ones(GRID.shape), None)
    rho, info = continuity_substep(st, None, FluidParams(), 0.01)
    np.testing.assert_allclose(rho, 1.0, rtol=1e-13)
    assert info["sink"] == 0.0


def test_continuity_explicit_sink():
    st = FluidState(GRID, np.ones(GRID.shape), None)
    rho, _ = continuity_substep(st, full_mask(GRID), FluidParams(varsigma=0.0), 0.1, check_cfl=False)
    np.testing.assert_allclose(rho, 0.9, rtol=1e-15)


def test_continuity_conserves_mass_without_mask():
    st = swirling_state(GRID)
    params = FluidParams(varsigma=0.0)
    dt = max_stable_dt(st, None, params)
    rho, info = continuity_substep(st, None, params, dt)
    assert abs(np.sum(rho) - np.sum(st.rho)) <= 1e-12 * np.sum(st.rho)
    assert info["clipped_mass"] == 0.0


def test_continuity_damping_conserves_mass():
    st = swirling_state(GRID)
    params = FluidParams(varsigma=0.05)
    rho, _ = continuity_substep(st, None, params, max_stable_dt(st, None, params))
    assert abs(np.sum(rho) - np.sum(st.rho)) <= 1e-12 * np.sum(st.rho)


def test_cfl_violation():
    st = swirling_state(GRID, amp=5.0)
    with pytest.raises(CFLViolation):
        continuity_substep(st, None, FluidParams(), 1.0)


def test_momentum_quiescent_stays_at_rest():
    st = FluidState(GRID, np.ones(GRID.shape), None)
    params = FluidParams()
    rho, info = continuity_substep(st, None, params, 0.01)
    u, _ = momentum_substep(st, rho, info["fluxes"], None, params, 0.1, 0.01)
    for c in u:
        assert np.max(np.abs(c)) <= 1e-13


def test_matched_velocity_has_zero_penalty_force():
    rng = np.random.default_rng(1)
    pts = rng.uniform(-0.6, 0.6, size=(40, 2))
    ix = _indexer(GRID)
    V = np.array([0.3, -0.7])
    for a in range(2):
        P = interpolation_matrix(GRID, pts, a)
        n_int = ix.offsets[a + 1] - ix.offsets[a]
        u = np.full(n_int, V[a])
        force = -P.T @ (np.ones(len(pts)) * (P @ u - V[a]))
        assert np.max(np.abs(force)) <= 1e-14


@pytest.mark.parametrize("velocity_amp", [0.3, 0.0], ids=["swirl", "acoustic"])
def test_energy_non_increasing_without_solid_or_damping(velocity_amp):
    st = swirling_state(GRID, amp=velocity_amp)
    params = FluidParams(varsigma=0.0)
    worst = -np.inf
    for _ in range(20):
        dt = max_stable_dt(st, None, params)
        E0 = kinetic_energy(st) + sum(potential_energies(st, params))
        rho, info = continuity_substep(st, None, params, dt)
        u, _ = momentum_substep(st, rho, info["fluxes"], None, params, 0.1, dt)
        st = FluidState(GRID, rho, u, st.time + dt)
        E1 = kinetic_energy(st) + sum(potential_energies(st, params))
        worst = max(worst, (E1 - E0) / E0)
    assert worst <= 1e-8


def moving_square_window(velocity, M=2, h=0.05):
    sg = SolidGrid((-0.25, -0.25), (0.5, 0.5), (9, 9))
    X = sg.coordinates()
    v = np.asarray(velocity, dtype=float)[:, None, None] * np.ones_like(X)
    dt = h / M
    states = [DeformationField(sg, X + k * dt * v) for k in range(M + 1)]
    return SimpleNamespace(states=states, velocities=np.stack([v] * M), dt=dt), sg


def test_penalty_impulses_balance():
    ssp, sg = moving_square_window((0.4, -0.2))
    st = FluidState(GRID, np.ones(GRID.shape), None)
    res = solve_fsp(st, ssp, FluidParams(), 0.05, sg.weights())
    for b in res.bins:
        assert np.any(b.impulse_solid != 0)
        np.testing.assert_allclose(b.impulse_fluid, -b.impulse_solid, rtol=0.02)
        assert b.rho_min >= 0
        assert b.clipped_mass <= 1e-8 * st.mass()


def test_mass_non_increasing_with_solid():
    ssp, sg = moving_square_window((0.0, 0.0))
    st = FluidState(GRID, np.ones(GRID.shape), None)
    res = solve_fsp(st, ssp, FluidParams(), 0.05, sg.weights())
    masses = [st.mass()] + [b.mass for b in res.bins]
    assert np.all(np.diff(masses) <= 1e-14 * masses[0])
    assert all(b.sink > 0 for b in res.bins)


def test_trace_has_one_bin_per_substep():
    ssp, sg = moving_square_window((0.0, 0.0))
    st = FluidState(GRID, np.ones(GRID.shape), None)
    res = solve_fsp(st, ssp, FluidParams(), 0.05, sg.weights())
    assert res.trace.shape == ssp.velocities.shape
    assert np.all(np.isfinite(res.trace))
    assert len(res.bins) == len(ssp.velocities)
