import csv
import json
import math
import subprocess
import sys

import numpy as np

from subdiffusion import cli
from subdiffusion.elliptic import StepSolver
from subdiffusion.fracderiv import mittag_leffler


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def strip_wall_time(obj):
    if isinstance(obj, dict):
        return {k: strip_wall_time(v) for k, v in obj.items() if k != "wall_time_s"}
    if isinstance(obj, list):
        return [strip_wall_time(v) for v in obj]
    return obj


def write_config(tmp_path, text, name="run.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


# -- helpers ----------------------------------------------------------------------------


def test_snapshot_indices():
    assert cli.snapshot_indices(10, 5) == [0, 2, 5, 8, 10]
    assert cli.snapshot_indices(1, 5) == [0, 1]


def test_observed_orders():
    orders = cli.observed_orders([1.0, 0.25, 0.0625], [8, 16, 32])
    np.testing.assert_allclose(orders, [2.0, 2.0])


# -- solve -------------------------------------------------------------------------------


def test_zero_preset_writes_zero_field(tmp_path):
    assert cli.main(["solve", "--preset", "zero", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "solution.csv")
    assert rows and list(rows[0]) == ["x", "t", "u"]
    assert all(float(r["u"]) == 0.0 for r in rows)
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["final_time_error"]["max_final"] == 0.0


def test_eigenmode_solve_accuracy(tmp_path):
    cfg = write_config(tmp_path, "[problem]\npreset = 'eigenmode'\n[output]\nsnapshots = 3\n")
    assert cli.main(["solve", "--config", cfg, "--out", str(tmp_path)]) == 0
    rows = [r for r in read_csv(tmp_path / "solution.csv") if float(r["t"]) == 1.0]
    mid = next(r for r in rows if float(r["x"]) == 0.5)
    ref = mittag_leffler(0.5, -math.pi**2)
    assert abs(float(mid["u"]) - ref) / ref <= 0.05
    assert sorted({float(r["t"]) for r in read_csv(tmp_path / "solution.csv")}) == [0.0, 0.5, 1.0]


def test_solve_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert cli.main(["solve", "--preset", "manufactured", "--out", str(d)]) == 0
    assert (a / "solution.csv").read_bytes() == (b / "solution.csv").read_bytes()
    ja, jb = (json.loads((d / "summary.json").read_text()) for d in (a, b))
    assert strip_wall_time(ja) == strip_wall_time(jb)


def test_two_dimensional_csv_columns(tmp_path):
    cfg = write_config(tmp_path, "[problem]\npreset = 'aniso2d'\nM = 8\nN = 7\n")
    assert cli.main(["solve", "--config", cfg, "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "solution.csv")
    assert list(rows[0]) == ["x", "y", "t", "u"]
    assert len(rows) == 49 * len(cli.snapshot_indices(8, 5))


def test_custom_expression_problem(tmp_path):
    cfg = write_config(
        tmp_path,
        "[problem]\nalpha = 0.4\nM = 16\nN = 15\n[coefficients]\na = '1 + x'\nf = 'sin(pi*x)*t'\nu0 = 'x*(1 - x)'\n",
    )
    assert cli.main(["solve", "--config", cfg, "--out", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["final_time_error"] is None and summary["problem"]["name"] == "custom"


def test_output_dir_from_environment(tmp_path, monkeypatch):
    target = tmp_path / "env-out"
    monkeypatch.setenv(cli.OUT_ENV, str(target))
    monkeypatch.chdir(tmp_path)
    assert cli.main(["solve", "--preset", "zero"]) == 0
    assert (target / "solution.csv").exists()
    monkeypatch.delenv(cli.OUT_ENV)
    assert cli.main(["solve", "--preset", "zero"]) == 0
    assert (tmp_path / cli.DEFAULT_OUT / "solution.csv").exists()


# -- study -------------------------------------------------------------------------------


def test_manufactured_study_orders(tmp_path):
    cfg = write_config(tmp_path, "[problem]\npreset = 'manufactured'\n[study]\nladder = [[16, 255], [32, 255], [64, 255]]\n")
    assert cli.main(["study", "--config", cfg, "--out", str(tmp_path), "--threads", "2"]) == 0
    d = json.loads((tmp_path / "study.json").read_text())
    assert d["kind"] == "errors" and all(d["decreasing"].values())
    assert all(o > 1.0 for o in d["orders"]["max_final"])
    rows = read_csv(tmp_path / "study.csv")
    assert [int(r["M"]) for r in rows] == [16, 32, 64] and rows[0]["order_max_final"] == ""


def test_cauchy_study_without_reference(tmp_path):
    cfg = write_config(tmp_path, "[problem]\npreset = 'stationary'\n[study]\nladder = [[8, 15], [16, 15], [32, 15]]\n")
    assert cli.main(["study", "--config", cfg, "--out", str(tmp_path)]) == 0
    d = json.loads((tmp_path / "study.json").read_text())
    assert d["kind"] == "differences"
    assert all(v <= 1e-8 for r in d["rungs"][1:] for v in r["values"].values())


def test_study_threads_do_not_change_results(tmp_path):
    cfg = write_config(tmp_path, "[problem]\npreset = 'eigenmode'\n[study]\nladder = [[16, 31], [32, 31], [64, 31]]\n")
    for n, d in (("1", tmp_path / "s1"), ("3", tmp_path / "s3")):
        assert cli.main(["study", "--config", cfg, "--out", str(d), "--threads", n]) == 0
    assert (tmp_path / "s1" / "study.csv").read_bytes() == (tmp_path / "s3" / "study.csv").read_bytes()


def test_cauchy_differences_shape():
    from subdiffusion.config import parse_config
    from subdiffusion.presets import build_problem
    from subdiffusion.timestepper import run

    base = parse_config(preset="eigenmode")
    coarse = run(build_problem(base.with_resolution(8, 7)).problem)
    fine = run(build_problem(base.with_resolution(16, 15)).problem)
    diffs = cli.cauchy_differences(coarse, fine)
    assert set(diffs) >= {"max_final"} and all(v >= 0 for v in diffs.values())


# -- diagnose and kernel gap -------------------------------------------------------------


def test_diagnose_passes(tmp_path):
    cfg = write_config(tmp_path, "[problem]\npreset = 'eigenmode'\nM = 64\nN = 63\n")
    assert cli.main(["diagnose", "--config", cfg, "--out", str(tmp_path), "--seed", "3"]) == 0
    d = json.loads((tmp_path / "diagnostics.json").read_text())
    assert d["passed"] and d["failures"] == []
    assert d["energy_certificate"]["passed"]
    assert "pass" in (tmp_path / "diagnostics.txt").read_text()


def test_diagnose_detects_fault(tmp_path, capsys):
    cfg = write_config(tmp_path, "[problem]\npreset = 'eigenmode'\nM = 64\nN = 63\n")
    code = cli.main(["diagnose", "--config", cfg, "--out", str(tmp_path), "--inject-fault", "flip-u1"])
    assert code == cli.EXIT_CERTIFICATE == 4
    err = capsys.readouterr().err
    assert "FAILED" in err and "residual" in err
    d = json.loads((tmp_path / "diagnostics.json").read_text())
    assert not d["passed"] and d["fault"] == "flip-u1"


def test_diagnose_is_deterministic(tmp_path):
    for d in ("a", "b"):
        assert cli.main(["diagnose", "--preset", "zero", "--out", str(tmp_path / d)]) == 0
    ja, jb = (json.loads((tmp_path / d / "diagnostics.json").read_text()) for d in ("a", "b"))
    assert strip_wall_time(ja) == strip_wall_time(jb)


def test_diagnose_short_horizon_skips_weak_form(tmp_path):
    cfg = write_config(tmp_path, "[problem]\npreset = 'eigenmode'\nM = 4\nN = 15\n")
    assert cli.main(["diagnose", "--config", cfg, "--out", str(tmp_path)]) == 0
    d = json.loads((tmp_path / "diagnostics.json").read_text())
    assert "margin" in d["weak_form_skipped"]


def test_kernel_gap_report(tmp_path):
    assert cli.main(["kernel-gap", "--preset", "eigenmode", "--out", str(tmp_path)]) == 0
    d = json.loads((tmp_path / "kernel_gap.json").read_text())
    assert len(d["levels"]) == 4
    assert all(1.8 <= r <= 2.2 for r in d["ratios"])
    for lv in d["levels"]:
        assert abs(lv["sup_gap"] - lv["closed_form"]) <= 1e-12


# -- failures and exit codes ----------------------------------------------------------


def test_config_error_exit_code(tmp_path, capsys):
    cfg = write_config(tmp_path, "[problem]\npreset = 'eigenmode'\nalpha = 1.0\n")
    assert cli.main(["solve", "--config", cfg, "--out", str(tmp_path)]) == cli.EXIT_CONFIG == 2
    assert "alpha must lie strictly in (0,1)" in capsys.readouterr().err
    assert cli.main(["solve", "--out", str(tmp_path)]) == 2
    assert cli.main(["solve", "--preset", "zero", "--threads", "0", "--out", str(tmp_path)]) == 2


def test_bad_initial_data_is_config_error(tmp_path):
    cfg = write_config(tmp_path, "[problem]\nM = 4\nN = 7\n[coefficients]\nu0 = 'cos(x)'\n")
    assert cli.main(["solve", "--config", cfg, "--out", str(tmp_path)]) == 2


def test_solver_failure_exit_code(tmp_path, monkeypatch):
    monkeypatch.setattr(StepSolver.__init__, "__defaults__", (1e-30,))
    cfg = write_config(tmp_path, "[problem]\npreset = 'aniso2d'\nM = 4\nN = 7\n")
    assert cli.main(["solve", "--config", cfg, "--out", str(tmp_path)]) == cli.EXIT_SOLVER == 3
    err = json.loads((tmp_path / "error.json").read_text())
    assert err["error"] == "solver" and err["residual"] > 1e-30


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "subdiffusion", "kernel-gap", "--preset", "zero", "--out", str(tmp_path)],
        capture_output=True,
        text=True,
        check=False,
    )
    assert proc.returncode == 0, proc.stderr
    assert "successive ratios" in proc.stdout
