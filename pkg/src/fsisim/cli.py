"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 solver failure (partial
outputs are written first), 4 ledger violation found by ``check-energy``.
"""
from __future__ import annotations

import argparse
import csv
import sys
import warnings
from pathlib import Path

from . import io
from .config import ConfigError, parse_config
from .diagnostics import ResolutionError, classify_boundary, fat_cantor_profile, interface_area, lemma_checks
from .driver import SchemeFailure, ledger_check, run_scheme

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_LEDGER = 0, 2, 3, 4


def _load_config(args):
    text = Path(args.config).read_text() if getattr(args, "config", None) else ""
    for item in getattr(args, "set", None) or []:
        text += "\n" + item
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        cfg = parse_config(text)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    return cfg


def _write_csv(path, rows, columns):
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([io.FLOAT % r[c] if isinstance(r[c], float) else r[c] for c in columns])


def cmd_run(args):
    cfg = _load_config(args)
    out = Path(args.out or cfg.output_dir)
    try:
        result = run_scheme(cfg.params, snapshot_every=cfg.snapshot_every)
        status = EXIT_OK
    except SchemeFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        result = exc.partial
        result.stats["failure"] = {"window": exc.window, "message": str(exc)}
        status = EXIT_SOLVER
    io.write_outputs(result, out, vtk=args.vtk)
    if not args.no_plots:
        from .plotting import run_figures

        run_figures(result, out)
    bad = [i for i, v in enumerate(result.ledger.column("violation")) if v > 0]
    print(f"wrote {out}: {len(result.ledger)} ledger rows, {len(bad)} over budget")
    return status


def cmd_check_energy(args):
    ledger = io.read_ledger_csv(args.ledger)
    if len(ledger) == 0:
        print("empty ledger: nothing to check")
        return EXIT_OK
    total0 = ledger.column("total")[0]
    bad = ledger_check(ledger, args.budget * abs(total0))
    if bad:
        for i in bad:
            row = ledger.rows[i]
            excess = row["total"] + ledger.cumulative()[i] - total0
            print(f"row {i} (t = {row['time']:.6g}): total + dissipation exceeds total(0) by {excess:.6e}")
        return EXIT_LEDGER
    print(f"ok: {len(ledger)} rows within {args.budget:g} x total(0)")
    return EXIT_OK


def cmd_classify(args):
    state, container = io.read_solid_snapshot(args.snapshot)
    if container is None:
        print("error: snapshot has no container header", file=sys.stderr)
        return EXIT_CONFIG
    cls = classify_boundary(state, container, args.wall_tol, args.self_tol, args.delta_ref)
    lem = lemma_checks(state, cls)
    try:
        area = interface_area(state, cls)
    except ValueError as exc:
        area = None
        print(f"warning: {exc}", file=sys.stderr)
    report = io.classification_report(cls, lem, area)
    if args.out:
        io.write_report(args.out, report)
    print(f"C {report['counts']['C']}  I {report['counts']['I']}  N {report['counts']['N']}  area {area}")
    for c in report["claims"]:
        print(f"{c['name']}: {'pass' if c['passed'] else 'FAIL'} {c['witness'] or ''}")
    return EXIT_OK


def cmd_cusp_demo(args):
    try:
        prof = fat_cantor_profile(args.levels, args.resolution)
    except (ResolutionError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    report = io.cantor_report(prof)
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        io.write_report(out / "cantor.json", report)
        if not args.no_plots:
            from .plotting import plot_cantor

            plot_cantor(prof, out / "cantor.png")
    print(f"positive measure {prof.positive_measure:.16e}  complement {prof.complement_measure:.16e}")
    return EXIT_OK


def cmd_study(args, kind):
    from .studies import EPS_COLUMNS, H_COLUMNS, strictly_decreasing, study_eps, study_h

    cfg = _load_config(args)
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        if kind == "h":
            rows = study_h(cfg.params, args.windows)
            _write_csv(out / "study_h.csv", rows, H_COLUMNS)
            xs, key, trend = [r["h"] for r in rows], "mismatch_integral", strictly_decreasing(
                [r["mismatch_integral"] for r in rows]
            )
        else:
            rows = study_eps(cfg.params, args.eps)
            _write_csv(out / "study_eps.csv", rows, EPS_COLUMNS)
            # sorted by ascending eps, growth as eps shrinks reads as a decreasing series
            xs, key = [r["eps"] for r in rows], "collar_integral"
            by_eps = sorted(rows, key=lambda r: r["eps"])
            trend = strictly_decreasing([r[key] for r in by_eps])
    except SchemeFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    if not args.no_plots:
        from .plotting import plot_series

        plot_series(xs, {key: [r[key] for r in rows]}, out / f"study_{kind}.png", kind, key, logx=True)
    for r in rows:
        print(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))
    if kind == "h":
        print(f"mismatch strictly decreasing in h: {trend}")
    else:
        print(f"collar integral strictly increasing as eps decreases: {trend}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="fsisim", description="Penalized fluid-structure time stepping and contact diagnostics.")
    sub = p.add_subparsers(dest="command", required=True)

    def run_opts(sp):
        sp.add_argument("--config", help="key = value configuration file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one configuration key")
        sp.add_argument("--out", help="output directory (overrides output_dir)")
        sp.add_argument("--no-plots", action="store_true", help="skip the PNG figures")

    r = sub.add_parser("run", help="run the coupled scheme")
    run_opts(r)
    r.add_argument("--vtk", action="store_true", help="also write legacy VTK fluid files")

    c = sub.add_parser("check-energy", help="check a ledger CSV against the energy inequality")
    c.add_argument("ledger")
    c.add_argument("--budget", type=float, default=1e-3, help="allowance as a fraction of total(0) (default 1e-3)")

    k = sub.add_parser("classify", help="classify the boundary of a solid snapshot")
    k.add_argument("snapshot")
    k.add_argument("--wall-tol", type=float)
    k.add_argument("--self-tol", type=float)
    k.add_argument("--delta-ref", type=float)
    k.add_argument("--out", help="JSON report path")

    q = sub.add_parser("cusp-demo", help="fat-Cantor profile and its measures")
    q.add_argument("--levels", type=int, default=12)
    q.add_argument("--resolution", type=int, default=2**20)
    q.add_argument("--out")
    q.add_argument("--no-plots", action="store_true")

    sh = sub.add_parser("study-h", help="coupling-window refinement sweep")
    run_opts(sh)
    sh.add_argument("--windows", type=int, nargs="+", default=[10, 20, 40])

    se = sub.add_parser("study-eps", help="regularization sweep")
    run_opts(se)
    se.add_argument("--eps", type=float, nargs="+", default=[0.1, 0.05, 0.025])
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    handlers = {
        "run": cmd_run,
        "check-energy": cmd_check_energy,
        "classify": cmd_classify,
        "cusp-demo": cmd_cusp_demo,
        "study-h": lambda a: cmd_study(a, "h"),
        "study-eps": lambda a: cmd_study(a, "eps"),
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except io.OutputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
