import json
import subprocess
import sys

import pytest

from cfcalib.cli import main


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def synth_pairs(tmp_path_factory):
    out = tmp_path_factory.mktemp("syn")
    assert run("synth", "--out", out, "--n", 2, "--seed", 4) == 0
    return out / "pairs.json"


def manifest(path):
    return json.loads((path / "manifest.json").read_text())


def test_select_bad_header_exit_2(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    assert run("select", "--input", bad, "--out", tmp_path / "o", "--stop-line", "1:0") == 2


def test_select_empty_input_exit_0(tmp_path):
    empty = tmp_path / "e.csv"
    empty.write_text("track_id,frame,t,x,y,speed,lane_id,length,leader_id\n")
    out = tmp_path / "o"
    assert run("select", "--input", empty, "--out", out, "--stop-line", "1:0") == 0
    assert json.loads((out / "pairs.json").read_text()) == {"pairs": []}
    assert json.loads((out / "rejections.json").read_text())["accepted"] == 0
    assert manifest(out)["subcommand"] == "select"


def test_calibrate_pop_too_small(tmp_path, synth_pairs, capsys):
    assert run("calibrate", "--pairs", synth_pairs, "--out", tmp_path, "--pop", 3) == 2
    assert "population too small" in capsys.readouterr().err


def test_calibrate_schedule_shape(tmp_path, synth_pairs):
    assert run("calibrate", "--pairs", synth_pairs, "--out", tmp_path, "--model", "eidm_sched",
               "--schedule-breakpoints", "5,12", "--pop", 6, "--iters", 1) == 0
    res = json.loads((tmp_path / "results.json").read_text())
    assert [bp[0] for bp in res[0]["best_params"]["amax_schedule"]] == [5.0, 12.0]
    assert res[0]["model"] == "eidm_sched"
    m = manifest(tmp_path)
    assert m["schema_version"] == 1 and "jobs" not in m["config"]
    assert set(m["inputs"]) == {"pairs"}


def test_config_file_precedence(tmp_path, synth_pairs):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"pop": 5, "iters": 1, "seed": 3}))
    out = tmp_path / "o"
    assert run("calibrate", "--pairs", synth_pairs, "--out", out, "--config", cfg, "--iters", 2) == 0
    conf = manifest(out)["config"]
    assert conf["pop"] == 5 and conf["iters"] == 2 and conf["seed"] == 3


def test_simulate_zero_duration_header_only(tmp_path):
    assert run("simulate", "--scenario", "ring", "--duration", 0, "--out", tmp_path) == 0
    assert (tmp_path / "records.csv").read_text() == "t,vehicle_id,lane_id,x,odometer,v,a,gap\n"


def test_simulate_unknown_scenario(tmp_path):
    assert run("simulate", "--scenario", "bogus", "--out", tmp_path) == 2


def test_simulate_then_analyze(tmp_path):
    sim = tmp_path / "sim"
    assert run("simulate", "--scenario", "queue", "--duration", 120, "--out", sim) == 0
    for report, name in (("metrics", "metrics.json"), ("queue", "queue_stats.csv"),
                         ("fd", "fd_points.csv"), ("wave", "wave.csv")):
        out = tmp_path / report
        assert run("analyze", "--log", sim, "--report", report, "--out", out) == 0
        assert (out / name).exists()
    m = json.loads((tmp_path / "metrics" / "metrics.json").read_text())
    assert m["collisions"] == 0 and m["emergency_stops"] == 0


def test_analyze_missing_log(tmp_path):
    assert run("analyze", "--log", tmp_path / "none", "--report", "fd", "--out", tmp_path) == 2


def test_sensitivity_ishigami_self_test(tmp_path):
    with pytest.warns(UserWarning):
        assert run("sensitivity", "--ishigami", "--samples", 3000, "--out", tmp_path) == 0
    rep = json.loads((tmp_path / "sensitivity.json").read_text())
    assert rep["n_base"] == 2048
    for est, ref in zip(rep["sobol_total"], rep["analytic_total"]):
        assert abs(est - ref) < 0.05


def test_sensitivity_oat_on_pairs(tmp_path, synth_pairs):
    assert run("sensitivity", "--pairs", synth_pairs, "--method", "oat", "--grid", 3,
               "--out", tmp_path) == 0
    rep = json.loads((tmp_path / "sensitivity.json").read_text())
    assert rep["names"][0] == "a_max" and rep["recommended"]


def test_sensitivity_requires_pairs(tmp_path):
    assert run("sensitivity", "--out", tmp_path) == 2


def test_missing_required_flag_is_usage_error():
    proc = subprocess.run([sys.executable, "-m", "cfcalib.cli", "calibrate"], capture_output=True)
    assert proc.returncode == 2


def test_jobs_env_variable(tmp_path, synth_pairs, monkeypatch):
    monkeypatch.setenv("CFCALIB_JOBS", "3")
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("calibrate", "--pairs", synth_pairs, "--out", a, "--pop", 6, "--iters", 2) == 0
    monkeypatch.setenv("CFCALIB_JOBS", "1")
    assert run("calibrate", "--pairs", synth_pairs, "--out", b, "--pop", 6, "--iters", 2) == 0
    assert (a / "results.json").read_bytes() == (b / "results.json").read_bytes()
