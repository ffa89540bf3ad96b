import json

import pytest

from fsisim import io
from fsisim.cli import EXIT_CONFIG, EXIT_LEDGER, EXIT_OK, EXIT_SOLVER, main
from fsisim.diagnostics import fold_fixture
from fsisim.driver import EnergyLedger

TINY = ["--set", "T = 0.02", "--set", "N = 2", "--set", "fluid_resolution = 16", "--set", "solid_resolution = 7",
        "--set", "M = 2"]


def test_run_writes_outputs(tmp_path, capsys):
    assert main(["run", *TINY, "--out", str(tmp_path), "--no-plots"]) == EXIT_OK
    assert (tmp_path / "ledger.csv").exists()
    assert main(["check-energy", str(tmp_path / "ledger.csv")]) == EXIT_OK
    assert "ok:" in capsys.readouterr().out


def test_run_with_plots(tmp_path):
    assert main(["run", *TINY, "--out", str(tmp_path)]) == EXIT_OK
    assert list(tmp_path.glob("*.png"))


def test_config_error_exit_code(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("viscocity = 1\n")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "viscocity" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "absent.cfg")]) == EXIT_CONFIG


def test_solver_failure_writes_partial_outputs(tmp_path):
    args = ["run", *TINY, "--set", "preset = falling-disk", "--set", "center_y = 0.3", "--set", "speed = 0.5",
            "--set", "max_iter = 1", "--set", "tol = 1e-14", "--out", str(tmp_path), "--no-plots"]
    assert main(args) == EXIT_SOLVER
    report = json.loads((tmp_path / "run.json").read_text())
    assert "failure" in report["stats"]
    assert (tmp_path / "ledger.csv").exists()


def test_check_energy_flags_violation(tmp_path, capsys):
    led = EnergyLedger()
    led.append(time=0.0, total=1.0)
    led.append(time=0.1, total=2.0)
    path = tmp_path / "ledger.csv"
    io.write_ledger_csv(led, path)
    assert main(["check-energy", str(path)]) == EXIT_LEDGER
    assert "row 1" in capsys.readouterr().out


def test_classify_fold_snapshot(tmp_path, capsys):
    state, container = fold_fixture()
    snap = tmp_path / "solid.txt"
    io.write_solid_snapshot(snap, state, container)
    out = tmp_path / "report.json"
    assert main(["classify", str(snap), "--out", str(out)]) == EXIT_OK
    report = json.loads(out.read_text())
    assert report["counts"]["N"] > 0
    assert all(c["passed"] for c in report["claims"])


def test_cusp_demo(tmp_path, capsys):
    assert main(["cusp-demo", "--levels", "3", "--resolution", "4096", "--out", str(tmp_path), "--no-plots"]) == EXIT_OK
    assert json.loads((tmp_path / "cantor.json").read_text())["positive_measure"] == pytest.approx(0.4375)
    assert main(["cusp-demo", "--levels", "12", "--resolution", "1024"]) == EXIT_CONFIG


def test_missing_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as info:
        main([])
    assert info.value.code == 2
