"""Refinement sweeps over the coupling window ``h`` and the regularization ``eps``."""
from __future__ import annotations

import dataclasses

import numpy as np

from .diagnostics import classify_boundary, collar_pressure_profile, interface_area
from .driver import run_scheme

H_COLUMNS = ("h", "N", "mismatch_integral", "mask_mass_max", "mask_mass_final", "min_wall_distance", "violations")
EPS_COLUMNS = ("eps", "min_wall_distance", "collar_integral", "collar_max", "collar_final", "K_max", "min_det", "min_interface_area")


def collar_series(result, cells=2):
    """Collar pressure integral at ``cells`` fluid cells for every snapshot of a run."""
    p = result.params
    width = cells * p.container_size / p.fluid_resolution
    fp = p.fluid_params()
    return np.array([collar_pressure_profile(f, e, [width], fp)[0] for _, e, f in result.snapshots])


def interface_series(result):
    container = result.params.fluid_grid()
    out = []
    for _, eta, _ in result.snapshots:
        out.append(interface_area(eta, classify_boundary(eta, container)))
    return np.array(out)


def study_h(base, windows):
    """Run ``base`` with each window count; one row per run (``h = T / N``)."""
    rows = []
    for N in windows:
        r = run_scheme(dataclasses.replace(base, N=int(N)))
        mm = r.series("mask_mass")
        rows.append(
            dict(
                h=r.params.h,
                N=int(N),
                mismatch_integral=float(np.sum(r.series("mismatch_sq"))),
                mask_mass_max=float(mm.max()),
                mask_mass_final=float(mm[-1]),
                min_wall_distance=float(r.series("min_wall_distance").min()),
                violations=int(np.count_nonzero(r.ledger.column("violation") > 0)),
            )
        )
    return rows


def study_eps(base, eps_values):
    """Run ``base`` with each ``eps``; one row per run with contact and collar statistics.

    ``collar_integral`` is the collar pressure at two fluid cells integrated
    over the run time (trapezoid over the snapshots).
    """
    rows = []
    for eps in eps_values:
        r = run_scheme(dataclasses.replace(base, eps=float(eps)))
        col = collar_series(r)
        times = np.array([t for t, _, _ in r.snapshots])
        rows.append(
            dict(
                eps=float(eps),
                min_wall_distance=float(r.series("min_wall_distance").min()),
                collar_integral=float(np.trapezoid(col, times)),
                collar_max=float(col.max()),
                collar_final=float(col[-1]),
                K_max=float(r.series("K").max()),
                min_det=float(r.series("min_det").min()),
                min_interface_area=float(interface_series(r).min()),
            )
        )
    return rows


def strictly_decreasing(values):
    v = np.asarray(values, dtype=float)
    return bool(np.all(np.diff(v) < 0))
