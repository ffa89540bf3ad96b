"""Output formats: ledger CSV, plain-text snapshots, legacy VTK and JSON reports.

Every float is written with ``%.16e`` (17 significant digits), which is
enough to read back the identical double, and the writers do not depend on
the locale.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .driver import LEDGER_COLUMNS, EnergyLedger
from .grids import FluidGrid, SolidGrid
from .kinematics import DeformationField

FLOAT = "%.16e"
SNAPSHOT_MAGIC = "fsisim-snapshot 1"


class OutputError(OSError):
    """Writing or reading an output file failed."""


def _fmt(x):
    return FLOAT % x


def _open(path, mode):
    try:
        return open(path, mode, newline="" if "w" in mode else None, encoding="ascii")
    except OSError as exc:
        raise OutputError(f"cannot open {path}: {exc.strerror or exc}") from exc


def write_ledger_csv(ledger, path):
    with _open(path, "w") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LEDGER_COLUMNS)
        for row in ledger.rows:
            w.writerow([_fmt(row[c]) for c in LEDGER_COLUMNS])


def read_ledger_csv(path):
    with _open(path, "r") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise OutputError(f"{path}: empty file, expected a ledger header") from None
        missing = [c for c in LEDGER_COLUMNS if c not in header]
        if missing:
            raise OutputError(f"{path}: missing ledger columns {', '.join(missing)}")
        ledger = EnergyLedger()
        for lineno, rec in enumerate(reader, start=2):
            try:
                ledger.append(**{k: float(v) for k, v in zip(header, rec)})
            except ValueError as exc:
                raise OutputError(f"{path}, line {lineno}: {exc}") from None
    return ledger


def _write_block(fh, name, values):
    values = np.asarray(values, dtype=float)
    fh.write(f"field {name}\n")
    fh.write("resolution " + " ".join(str(n) for n in values.shape) + "\n")
    rows = values.reshape(values.shape[0], -1) if values.ndim > 1 else values[None]
    for r in rows:
        fh.write(" ".join(_fmt(x) for x in r) + "\n")


def write_snapshot(path, fields, time=0.0, header=None):
    """Write named arrays with a text header.

    ``fields`` maps names to arrays of equal dimension; values follow row-major
    order, one line per first-axis index.  ``header`` adds ``key value...`` lines.
    """
    dims = {np.ndim(v) for v in fields.values()}
    if len(dims) > 1:
        raise ValueError("all snapshot fields must have the same dimension")
    with _open(path, "w") as fh:
        fh.write(SNAPSHOT_MAGIC + "\n")
        fh.write(f"dimension {dims.pop() if dims else 0}\n")
        fh.write(f"time {_fmt(time)}\n")
        for key, val in (header or {}).items():
            fh.write(f"{key} " + " ".join(_fmt(x) if isinstance(x, float) else str(x) for x in np.atleast_1d(val)) + "\n")
        fh.write("fields " + " ".join(fields) + "\n")
        for name, values in fields.items():
            _write_block(fh, name, values)


def read_snapshot(path):
    """Return ``(time, header dict of string lists, fields dict)``."""
    with _open(path, "r") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != SNAPSHOT_MAGIC:
        raise OutputError(f"{path}: not a snapshot file")
    header, fields = {}, {}
    k = 1
    while k < len(lines) and not lines[k].startswith("field "):
        key, *rest = lines[k].split()
        header[key] = rest
        k += 1
    while k < len(lines):
        name = lines[k].split(None, 1)[1]
        shape = tuple(int(n) for n in lines[k + 1].split()[1:])
        nrows = shape[0] if len(shape) > 1 else 1
        data = np.array([float(x) for line in lines[k + 2 : k + 2 + nrows] for x in line.split()])
        fields[name] = data.reshape(shape)
        k += 2 + nrows
    return float(header.get("time", ["0"])[0]), header, fields


def write_fluid_snapshot(path, state):
    g = state.grid
    fields = {"rho": state.rho}
    # face velocities have different shapes; store them averaged to cell centres
    for a, c in enumerate(state.u):
        fields[f"u{a}"] = 0.5 * (np.take(c, range(g.shape[a]), axis=a) + np.take(c, range(1, g.shape[a] + 1), axis=a))
    header = {"origin": [float(x) for x in g.origin], "extent": [float(x) for x in g.extent]}
    write_snapshot(path, fields, state.time, header)


def write_solid_snapshot(path, state, container=None):
    g = state.grid
    fields = {}
    for a in range(g.dim):
        fields[f"eta{a}"] = state.positions[a]
    for a in range(g.dim):
        fields[f"v{a}"] = state.velocity[a]
    header = {"solid_origin": [float(x) for x in g.origin], "solid_extent": [float(x) for x in g.extent]}
    if container is not None:
        header["container_origin"] = [float(x) for x in container.origin]
        header["container_extent"] = [float(x) for x in container.extent]
        header["container_resolution"] = list(container.resolution)
    write_snapshot(path, fields, state.time, header)


def read_solid_snapshot(path):
    """Return ``(DeformationField, FluidGrid or None)`` from :func:`write_solid_snapshot` output."""
    time, header, fields = read_snapshot(path)
    try:
        origin = [float(x) for x in header["solid_origin"]]
        extent = [float(x) for x in header["solid_extent"]]
    except KeyError:
        raise OutputError(f"{path}: missing solid_origin/solid_extent header") from None
    d = len(origin)
    pos = np.stack([fields[f"eta{a}"] for a in range(d)])
    vel = np.stack([fields[f"v{a}"] for a in range(d)]) if f"v{d - 1}" in fields else None
    grid = SolidGrid(tuple(origin), tuple(extent), pos.shape[1:])
    container = None
    if "container_origin" in header:
        container = FluidGrid(
            tuple(float(x) for x in header["container_origin"]),
            tuple(float(x) for x in header["container_extent"]),
            tuple(int(x) for x in header["container_resolution"]),
        )
    return DeformationField(grid, pos, vel, time), container


def write_vtk(path, state):
    """Legacy structured-points file with cell density and cell-averaged velocity."""
    g = state.grid
    nx, ny = g.shape
    u = [0.5 * (c[:-1] if a == 0 else c[:, :-1]) + 0.5 * (c[1:] if a == 0 else c[:, 1:]) for a, c in enumerate(state.u)]
    with _open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(f"fsisim fluid t={_fmt(state.time)}\nASCII\nDATASET STRUCTURED_POINTS\n")
        fh.write(f"DIMENSIONS {nx + 1} {ny + 1} 1\n")
        fh.write(f"ORIGIN {_fmt(g.origin[0])} {_fmt(g.origin[1])} 0\n")
        fh.write(f"SPACING {_fmt(g.spacing[0])} {_fmt(g.spacing[1])} 1\n")
        fh.write(f"CELL_DATA {nx * ny}\nSCALARS rho double 1\nLOOKUP_TABLE default\n")
        # VTK orders points with x fastest
        for v in state.rho.T.ravel():
            fh.write(_fmt(v) + "\n")
        fh.write("VECTORS velocity double\n")
        for a, b in zip(u[0].T.ravel(), u[1].T.ravel()):
            fh.write(f"{_fmt(a)} {_fmt(b)} 0\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_report(path, report):
    with _open(path, "w") as fh:
        json.dump(_jsonable(report), fh, indent=2, sort_keys=True)
        fh.write("\n")


def classification_report(classification, lemma, area, perimeter=None):
    return {
        "counts": classification.summary(),
        "tolerances": {
            "wall": classification.wall_tol,
            "self": classification.self_tol,
            "delta_ref": classification.delta_ref,
        },
        "labels": "".join(classification.labels.tolist()),
        "interface_area": area,
        "perimeter": perimeter,
        "claims": [
            {"name": c.name, "passed": c.passed, "witness": c.witness, "detail": c.detail} for c in lemma.claims
        ],
        "max_multiplicity": int(lemma.multiplicity.max()) if len(lemma.multiplicity) else 0,
    }


def cantor_report(profile):
    return {
        "levels": profile.levels,
        "resolution": profile.resolution,
        "positive_measure": profile.positive_measure,
        "complement_measure": profile.complement_measure,
        "positive_measure_exact": profile.positive_measure_exact,
        "complement_measure_exact": 1.0 - profile.positive_measure_exact,
        "sampled_positive_fraction": profile.sampled_positive_fraction,
        "widths": profile.widths,
    }


def write_outputs(result, directory, snapshots=True, vtk=False):
    """Write the ledger, snapshots and a run report for a :class:`RunResult`."""
    out = Path(directory)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OutputError(f"cannot create {out}: {exc.strerror or exc}") from exc
    files = [out / "ledger.csv"]
    write_ledger_csv(result.ledger, files[0])
    if snapshots:
        container = result.params.fluid_grid()
        for k, (t, eta, fluid) in enumerate(result.snapshots):
            fs, ss = out / f"fluid_{k:04d}.txt", out / f"solid_{k:04d}.txt"
            write_fluid_snapshot(fs, fluid)
            write_solid_snapshot(ss, eta, container)
            files += [fs, ss]
            if vtk:
                vf = out / f"fluid_{k:04d}.vtk"
                write_vtk(vf, fluid)
                files.append(vf)
    stats = {k: v for k, v in result.stats.items() if k not in ("centroid", "impulse_fluid", "impulse_solid")}
    stats["centroid"] = [list(c) for c in result.stats["centroid"]]
    report = {"params": vars(result.params), "stats": stats, "failure": result.stats.get("failure")}
    write_report(out / "run.json", report)
    files.append(out / "run.json")
    return files
