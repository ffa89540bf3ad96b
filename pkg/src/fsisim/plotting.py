"""Report figures, rendered off-screen with the Agg backend."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .kinematics import boundary_loop  # noqa: E402

STYLE = {"figure.figsize": (6.0, 4.0), "axes.linewidth": 0.6, "font.size": 9, "savefig.dpi": 120}


def _save(fig, path):
    path = Path(path)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_ledger(ledger, path):
    """Energy components, cumulative dissipation and the balance against ``total(0)``."""
    with plt.rc_context(STYLE):
        t = ledger.column("time")
        fig, (ax, bx) = plt.subplots(2, 1, sharex=True)
        for name in ("kinetic_fluid", "pressure_pot", "artificial_pot", "kinetic_solid", "E", "K"):
            ax.plot(t, ledger.column(name), lw=1, label=name)
        ax.plot(t, ledger.column("total"), "k", lw=1.5, label="total")
        ax.set_ylabel("energy")
        ax.legend(fontsize=7, ncol=2)
        total = ledger.column("total")
        bx.plot(t, ledger.cumulative(), lw=1, label="cumulative dissipation")
        bx.plot(t, total + ledger.cumulative() - total[0], "k", lw=1, label="total + cumulative - total(0)")
        bx.axhline(0.0, color="0.6", lw=0.5)
        bx.set_xlabel("time")
        bx.legend(fontsize=7)
        return _save(fig, path)


def plot_snapshot(fluid, eta, path, title=None):
    """Density image with the deformed solid outline."""
    with plt.rc_context(STYLE):
        g = fluid.grid
        fig, ax = plt.subplots()
        ext = (g.origin[0], g.upper[0], g.origin[1], g.upper[1])
        im = ax.imshow(fluid.rho.T, origin="lower", extent=ext, cmap="viridis")
        fig.colorbar(im, ax=ax, label="density")
        loop = boundary_loop(eta.grid)
        pts = eta.positions[:, loop[:, 0], loop[:, 1]]
        ax.plot(np.append(pts[0], pts[0, 0]), np.append(pts[1], pts[1, 0]), "w-", lw=1)
        ax.set_aspect("equal")
        ax.set_title(title or f"t = {fluid.time:.4g}")
        return _save(fig, path)


def plot_series(x, series, path, xlabel, ylabel, logx=False, logy=False):
    """Line plot of ``{label: values}`` against ``x``."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, y in series.items():
            ax.plot(x, y, "o-", lw=1, ms=3, label=label)
        if logx:
            ax.set_xscale("log")
        if logy:
            ax.set_yscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if len(series) > 1:
            ax.legend(fontsize=7)
        return _save(fig, path)


def plot_cantor(profile, path, max_points=20000):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        step = max(1, len(profile.x) // max_points)
        ax.plot(profile.x[::step], profile.f[::step], lw=0.6)
        ax.set_xlabel("x")
        ax.set_ylabel("f")
        ax.set_title(f"L = {profile.levels}: |{{f > 0}}| = {profile.positive_measure:.6f}")
        return _save(fig, path)


def run_figures(result, directory):
    """Ledger plot plus first and last density snapshots; returns the written paths."""
    out = Path(directory)
    files = [plot_ledger(result.ledger, out / "ledger.png")]
    if result.snapshots:
        for tag, (t, eta, fluid) in (("first", result.snapshots[0]), ("last", result.snapshots[-1])):
            files.append(plot_snapshot(fluid, eta, out / f"density_{tag}.png"))
    t = result.series("time")
    files.append(
        plot_series(t, {"mask mass": result.series("mask_mass")}, out / "mask_mass.png", "time", "mass in solid mask")
    )
    return files
