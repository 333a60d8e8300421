import csv
import json
from pathlib import Path

import pytest

from dgflow.cli_harness import (SchemaError, bundled_scenario, compare_solvers, load_scenario,
                                main, run_scenario, scenario_from_dict)

BUILTIN = ["quadratic", "power_p", "double_well_a0", "double_well_a1", "friction",
           "time_dependent", "stationary"]


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.mark.parametrize("name", BUILTIN)
def test_bundled_scenarios_load(name):
    sc = load_scenario(bundled_scenario(name))
    assert sc.name == name and sc.params.N >= 1


def test_missing_field_exits_2(tmp_path, capsys):
    spec = json.loads(bundled_scenario("quadratic").read_text())
    del spec["T"]
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(spec))
    assert main(["run", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "T" in capsys.readouterr().err


def test_syntax_error_reports_line(tmp_path, capsys):
    p = tmp_path / "broken.json"
    p.write_text('{\n  "name": "x",\n  "a": 1.0,,\n}\n')
    assert main(["run", str(p)]) == 2
    assert "line 3" in capsys.readouterr().err


@pytest.mark.parametrize("patch", [{"a": -1.0}, {"N": 0}, {"energy": {"family": "nope"}},
                                   {"tolerances": {"value": "small"}}])
def test_schema_rejections(patch):
    spec = json.loads(bundled_scenario("quadratic").read_text())
    spec.update(patch)
    with pytest.raises(SchemaError):
        scenario_from_dict(spec)


@pytest.fixture(scope="module")
def stationary_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("stationary")
    assert main(["run", "stationary", "--out", str(out)]) == 0
    return out


def test_stationary_end_to_end(stationary_run):
    rows = read_rows(stationary_run / "summary.csv")
    assert [r["stage"] for r in rows] == ["solve", "mms", "relax", "dual"]
    for r in rows:
        assert abs(float(r["value"])) <= 1e-6


def test_summary_matches_reports(stationary_run):
    rows = {r["stage"]: r for r in read_rows(stationary_run / "summary.csv")}
    for stage in rows:
        rep = json.loads((stationary_run / f"{stage}_report.json").read_text())
        assert float(rows[stage]["value"]) == pytest.approx(rep["value"], abs=1e-12)
        assert rep["passed"]
    assert (stationary_run / "relax_triple" / "mu.csv").exists()
    assert json.loads((stationary_run / "dual_certificate.json").read_text())["feasibility"]["feasible"]


def test_runs_are_deterministic(tmp_path):
    outs = []
    for k in range(2):
        out = tmp_path / f"r{k}"
        for stage in ("solve", "mms", "relax"):
            code, _, _ = run_scenario(bundled_scenario("quadratic"), stage, out, grid=(16, 32),
                                      log=lambda *a: None)
            assert code == 0
        outs.append(out)
    for f in ("solve_trajectory.csv", "solve_history.csv", "mms_trajectory.csv",
              "relax_reconstruction.csv", "relax_triple/mu.csv", "relax_triple/nu.csv"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes(), f
    a, b = (read_rows(o / "summary.csv") for o in outs)
    for r, s in zip(a, b):
        r.pop("runtime"), s.pop("runtime")
        assert r == s


def test_grid_and_n_overrides(tmp_path):
    out = tmp_path / "o"
    assert main(["run", "quadratic", "--stage", "relax", "--grid", "8x16", "--out", str(out)]) in (0, 1)
    hdr = json.loads((out / "relax_triple" / "header.json").read_text())["grid"]
    assert (hdr["Nt"], hdr["Nx"]) == (8, 16)
    assert main(["run", "quadratic", "--stage", "solve", "--n", "20", "--out", str(out)]) == 0
    assert len(read_rows(out / "solve_trajectory.csv")) == 21


def test_bad_grid_flag():
    assert main(["run", "quadratic", "--grid", "64by64"]) == 2


def test_compare_stationary_is_exact(tmp_path):
    rep = compare_solvers(bundled_scenario("stationary"), Ns=(50, 100), out=tmp_path, log=lambda *a: None)
    for row in rep["refinement"]:
        assert row["sup_distance"] == 0.0
    assert (tmp_path / "compare_table.csv").exists()


def test_compare_friction_residual():
    rep = compare_solvers(bundled_scenario("friction"), Ns=(400,), log=lambda *a: None)
    row = rep["refinement"][0]
    assert row["residual_direct"] <= 1e-2 and row["residual_mms"] <= 1e-2
    assert row["sup_distance"] <= 1e-2


def test_list_command(capsys):
    assert main(["list"]) == 0
    assert set(capsys.readouterr().out.split()) == set(BUILTIN)
