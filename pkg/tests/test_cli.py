import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from ercbf import cli
from ercbf.sim import COLUMNS, Trajectory, run_closed_loop

from conftest import bundled

SHORT = {"horizon_s": 1.0, "seed": 2}


def write(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc, ensure_ascii=False), encoding="utf-8")
    return str(path)


def read_json(path):
    return json.loads(path.read_text(encoding="utf-8"))


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


# ---------------------------------------------------------------------------
# run


def test_run_writes_trajectory_and_metrics(tmp_path):
    cfg = write(tmp_path, {**SHORT, "controller": "qp"})
    assert run_cli("run", cfg, "--out", tmp_path / "o") == 0
    with open(tmp_path / "o" / "trajectory.csv", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == [*COLUMNS, "status"]
    assert len(rows) == 1 + 101
    m = read_json(tmp_path / "o" / "metrics.json")
    for key in ("min_h_true", "min_h_band_lo", "min_gap", "infeasible_steps", "mean_abs_u", "wall_time_s"):
        assert key in m
    assert m["controller"] == "qp" and m["seed"] == 2


def test_run_is_byte_identical(tmp_path):
    cfg = write(tmp_path, {**SHORT, "measurement": "uniform"})
    run_cli("run", cfg, "--out", tmp_path / "a")
    run_cli("run", cfg, "--out", tmp_path / "b")
    assert (tmp_path / "a" / "trajectory.csv").read_bytes() == (tmp_path / "b" / "trajectory.csv").read_bytes()
    run_cli("run", cfg, "--out", tmp_path / "c", "--seed", 3)
    assert (tmp_path / "a" / "trajectory.csv").read_bytes() != (tmp_path / "c" / "trajectory.csv").read_bytes()


def test_csv_reproduces_in_memory_run(tmp_path):
    cfg = write(tmp_path, {**SHORT, "controller": "socp"})
    run_cli("run", cfg, "--out", tmp_path)
    back = Trajectory.from_csv(tmp_path / "trajectory.csv")
    mem = run_closed_loop(cli.build_config(cli.load_document(cfg)))
    for c in COLUMNS:
        np.testing.assert_array_equal(back[c], mem[c])


def test_paper_fig2_bands(tmp_path):
    assert run_cli("run", "paper_fig2", "--controller", "nominal", "--out", tmp_path / "n") == 0
    assert read_json(tmp_path / "n" / "metrics.json")["min_h_band_lo"] < 0
    assert run_cli("run", "paper_fig2.json", "--controller", "socp", "--out", tmp_path / "s") == 0
    assert read_json(tmp_path / "s" / "metrics.json")["min_h_band_lo"] >= 0


def test_controller_flag_overrides_config(tmp_path):
    cfg = write(tmp_path, {**SHORT, "controller": "qp"})
    run_cli("run", cfg, "--controller", "nominal", "--out", tmp_path)
    assert read_json(tmp_path / "metrics.json")["controller"] == "nominal"


def test_output_dir_from_config(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = write(tmp_path, {**SHORT, "output": {"dir": "from_cfg"}})
    assert run_cli("run", cfg) == 0
    assert (tmp_path / "from_cfg" / "metrics.json").is_file()


# ---------------------------------------------------------------------------
# compare


def test_compare_outputs(tmp_path):
    cfg = write(tmp_path, {**SHORT, "horizon_s": 2.0})
    assert run_cli("compare", cfg, "--out", tmp_path) == 0
    for c in ("nominal", "socp", "qp"):
        assert (tmp_path / f"trajectory_{c}.csv").is_file()
    rep = read_json(tmp_path / "comparison.json")
    assert rep["max_abs_gap_qp_minus_socp"] < 1.0
    assert rep["max_abs_u_qp_minus_socp"] == max(abs(v) for v in rep["deltas"]["u_qp_minus_socp"])
    dec = rep["qp_decomposition"]
    for u_nom, d, u in zip(dec["u_nom"], dec["u_delta_hat"], dec["u_rob"]):
        assert u == pytest.approx(u_nom + d, abs=1e-8)
    assert set(rep["min_gap"]) == {"nominal", "socp", "qp"}
    assert len(rep["t"]) == 201


def test_compare_collapses_without_error(tmp_path):
    cfg = write(tmp_path, {**SHORT, "horizon_s": 3.0, "bounds": {"E_p_m": 0, "E_v_mps": 0, "E_vdot_mps2": 0}})
    run_cli("compare", cfg, "--out", tmp_path)
    trajs = {c: Trajectory.from_csv(tmp_path / f"trajectory_{c}.csv") for c in ("nominal", "socp", "qp")}
    for c in ("socp", "qp"):
        for col in ("u", "p", "v", "h_true"):
            np.testing.assert_allclose(trajs[c][col], trajs["nominal"][col], rtol=0, atol=1e-9)


# ---------------------------------------------------------------------------
# montecarlo


def test_montecarlo_single_run_equals_run(tmp_path):
    cfg = write(tmp_path, {**SHORT, "controller": "qp", "measurement": "uniform"})
    assert run_cli("montecarlo", cfg, "--runs", 1, "--out", tmp_path / "mc") == 0
    run_cli("run", cfg, "--out", tmp_path / "r")
    agg = read_json(tmp_path / "mc" / "summary.json")
    single = read_json(tmp_path / "r" / "metrics.json")
    assert agg["n_runs"] == 1
    assert agg["min_h_true"]["min"] == single["min_h_true"]
    assert agg["min_gap"] == [single["min_gap"]]
    assert agg["violating_steps"] == single["violating_steps"]
    with open(tmp_path / "mc" / "runs.csv", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1 and float(rows[0]["min_h_true"]) == single["min_h_true"]


def test_montecarlo_seed_list(tmp_path):
    cfg = write(tmp_path, {**SHORT, "horizon_s": 0.2, "seeds": [5, 1, 9]})
    assert run_cli("montecarlo", cfg, "--out", tmp_path) == 0
    with open(tmp_path / "runs.csv", encoding="utf-8") as fh:
        assert [int(r["seed"]) for r in csv.DictReader(fh)] == [1, 5, 9]
    assert run_cli("montecarlo", cfg, "--runs", 4, "--out", tmp_path) == 2
    assert run_cli("montecarlo", cfg, "--runs", 0, "--out", tmp_path) == 2


@pytest.mark.slow
def test_montecarlo_stress_reports_violations(tmp_path):
    assert run_cli("montecarlo", "stress", "--runs", 100, "--out", tmp_path) == 0
    agg = read_json(tmp_path / "summary.json")
    assert agg["n_runs"] == 100 and agg["controller"] == "nominal"
    assert agg["violation_rate"] > 0


# ---------------------------------------------------------------------------
# configuration errors and exit codes


@pytest.mark.parametrize("doc, where", [
    ({"vehicle": {"mass": 1.0}}, "$.vehicle.mass"),
    ({"bogus": 1}, "$.bogus"),
    ({"scenario": {"v_d_kmh": 100, "v_d_mps": 27}}, "$.scenario"),
    ({"dt_integrator_s": 0.001, "substeps": 10}, "$"),
    ({"controller": "mpc"}, "$.controller"),
    ({"bounds": {"E_p_m": -1}}, "$.bounds.E_p_m"),
    ({"dt_control_s": 0.01, "dt_integrator_s": 0.003}, "$.dt_integrator_s"),
    ({"horizon_s": 1.005}, "$.horizon_s"),
    ({"scenario": {"v_max_kmh": 50, "v_min_kmh": 60}}, "$"),
])
def test_bad_config_exit_code(tmp_path, capsys, doc, where):
    assert run_cli("run", write(tmp_path, doc), "--out", tmp_path) == 2
    err = capsys.readouterr().err
    assert f"config error: {where}" in err


def test_missing_and_malformed_config(tmp_path, capsys):
    assert run_cli("run", tmp_path / "nope.json") == 2
    assert "not found" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text("{", encoding="utf-8")
    assert run_cli("run", bad) == 2
    assert "invalid JSON" in capsys.readouterr().err


def test_notes_and_unicode_accepted(tmp_path):
    doc = {**SHORT, "_note_why": "Δp in m, v in km/h", "vehicle": {"_note_m": "Table I — mass"}}
    out = tmp_path / "résultats"
    assert run_cli("run", write(tmp_path, doc, "données.json"), "--out", out) == 0
    m = json.loads((out / "metrics.json").read_bytes().decode("utf-8"))
    assert m["steps"] == 101


def test_infeasible_abort_exit_code(tmp_path):
    doc = {"horizon_s": 0.2, "controller": "socp", "measurement": "corner", "on_infeasible": "abort",
           "hdv": {"lam": 0, "sigma": 0}, "scenario": {"gap0_m": 5.0, "v_s0_mps": 0.0}}
    assert run_cli("run", write(tmp_path, doc), "--out", tmp_path) == 3
    assert read_json(tmp_path / "metrics.json")["aborted"] == "infeasible"


def test_divergence_exit_code(tmp_path):
    doc = {"horizon_s": 1.0, "controller": "nominal", "vehicle": {"m_kg": 1e-4}}
    assert run_cli("run", write(tmp_path, doc), "--out", tmp_path) == 4
    m = read_json(tmp_path / "metrics.json")
    assert m["aborted"] == "divergence"
    assert any("non-finite" in e for e in m["events"])


def test_units_converted():
    cfg = cli.build_config({"scenario": {"v_d_kmh": 36.0, "v_max_mps": 40.0}, "dt_control_s": 0.02,
                            "dt_integrator_s": 0.005, "horizon_s": 1.0})
    assert cfg.scenario.v_d == pytest.approx(10.0)
    assert cfg.scenario.v_max == 40.0
    assert cfg.substeps == 4


def test_bundled_configs_valid():
    names = cli.bundled_configs()
    assert {"paper_fig2.json", "paper_fig3.json", "stress.json", "montecarlo.json"} <= set(names)
    for name in names:
        cli.build_config(cli.load_document(name))
    assert bundled("paper_fig3.json").controller == "qp"


def test_console_entry_point(tmp_path):
    cfg = write(tmp_path, {**SHORT, "horizon_s": 0.1})
    res = subprocess.run([sys.executable, "-m", "ercbf.cli", "run", cfg, "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    res = subprocess.run([sys.executable, "-m", "ercbf.cli", "--help"], capture_output=True, text=True)
    assert "montecarlo" in res.stdout
