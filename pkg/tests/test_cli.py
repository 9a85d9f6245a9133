import csv
import json

import numpy as np
import pytest

from dyngame import ConstraintSpec, GameDefinition
from dyngame.cli import main
from dyngame.game_model import bundled_scenario, dump_scenario, load_scenario


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
    return tmp_path


def _scalar_config(path, x_bound=None, u_bound=None):
    g = GameDefinition([[1.0]], [[[1.0]], [[1.0]]], [[[1.0]], [[1.0]]], [[[1.0]], [[1.0]]], 3)
    kw = {}
    if x_bound is not None:
        kw.update(Gx=np.array([[1.0]]), gx=np.array([x_bound]))
    if u_bound is not None:
        kw.update(u_min=np.full((2, 1), -u_bound), u_max=np.full((2, 1), u_bound))
    dump_scenario(path, g, ConstraintSpec(1, 2, 1, **kw), metadata={"x0": [10.0]})
    return str(path)


def test_check_valid_platoon(workdir, capsys):
    assert main(["check", "--out", "c.json"]) == 0
    doc = json.loads((workdir / "c.json").read_text())
    assert doc["ok"] and doc["assumptions"]["method"] == "pencil"
    assert (workdir / "c.json.manifest.json").exists()


def test_check_singular_A_names_assumption(workdir, capsys):
    sc = load_scenario(bundled_scenario("platooning"))
    dump_scenario("s.json", sc.game, sc.spec, sc.solver, {})
    assert main(["check", "--config", "s.json"]) == 2
    assert "Assumption 2(i)" in capsys.readouterr().err


def test_malformed_config(workdir, capsys):
    (workdir / "bad.json").write_text("{\n  \"A\": [1,\n")
    assert main(["check", "--config", "bad.json"]) == 1
    assert "line" in capsys.readouterr().err


def test_usage_errors(workdir, capsys):
    assert main(["reproduce", "figure9"]) == 1
    assert main(["solve-fh", "--x0", "1,2"]) == 1
    assert main([]) == 1


def test_nonconvergence_exit_code(workdir, capsys):
    assert main(["solve-ol", "--max-iter", "2", "--tol", "1e-300"]) == 3


def test_infeasible_exit_code(workdir, capsys):
    cfg = _scalar_config(workdir / "inf.json", x_bound=1.0, u_bound=1.0)
    assert main(["solve-fh", "--config", cfg, "--kind", "none", "--out", "u.csv"]) == 4


def test_solve_fh_outputs(workdir):
    assert main(["solve-fh", "--kind", "ol", "--out", "u.csv"]) == 0
    rows = list(csv.reader(open(workdir / "u.csv")))
    assert rows[0][0] == "t" and len(rows) == 11
    summary = json.loads((workdir / "u.csv.json").read_text())
    assert summary["converged"] and summary["residual"] <= 1e-8
    assert summary["monotonicity"]["strongly_monotone"]


def test_solve_outputs_round_trip_17_digits(workdir):
    assert main(["solve-cl", "--method", "riccati", "--out", "cl.json"]) == 0
    doc = json.loads((workdir / "cl.json").read_text())
    P = np.array(doc["P_cl"][0])
    assert P.shape == (8, 8)
    assert np.allclose(P, P.T)


def test_simulate_and_manifest(workdir):
    assert main(["simulate", "--steps", "40", "--out", "sim.csv"]) == 0
    man = json.loads((workdir / "sim.csv.manifest.json").read_text())
    assert {o["path"] for o in man["outputs"]} == {"sim.csv", "sim.csv.json"}
    assert man["config_sha256"] and man["tool_version"] == "0.1.0"
    assert man["started"] == "1970-01-01T00:00:00Z"


def test_export_matches_bundled(workdir):
    assert main(["export-scenario", "platooning", "--out", "p.json"]) == 0
    assert (workdir / "p.json").read_bytes() == bundled_scenario("platooning").read_bytes()


def test_log_env(workdir, monkeypatch, capsys):
    monkeypatch.setenv("DYNGAME_LOG", "debug")
    assert main(["solve-ol", "--out", "ol.json"]) == 0
