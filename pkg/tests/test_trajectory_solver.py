import json

import numpy as np
import pytest

from conftest import scenario_params, solved
from dgflow._optim import StagnationError, lbfgs
from dgflow.cli_harness import bundled_scenario
from dgflow.degiorgi_functional import Trajectory, evaluate_J
from dgflow.trajectory_solver import (SolverOptions, max_threads, minimize_J, minimizing_movements,
                                      verify_null_minimum)
from oracles import exact_quadratic, rk4, sample

DW_TERMINAL = 0.9994971855461144  # RK4, 1e5 steps, cross-checked with solve_ivp to 1e-12


def test_quadratic_minimiser():
    p, res = solved("quadratic")
    assert abs(res.value) <= 1e-3
    assert np.max(np.abs(res.trajectory.nodes[:, 0] - exact_quadratic(res.trajectory.times))) <= 5e-3
    assert res.value == pytest.approx(evaluate_J(p, res.trajectory), abs=1e-12)
    assert res.trajectory.nodes[0, 0] == p.x0[0]


def test_history_is_monotone():
    _, res = solved("quadratic")
    f = [h[1] for h in res.history]
    assert all(b <= a + 1e-12 for a, b in zip(f, f[1:]))


def test_power_against_oracle():
    p, res = solved("power_p")
    assert res.value <= 1e-3
    ts, xs = rk4(lambda t, x: -x * abs(x), 1.0, 1.0)
    ref = sample(ts, xs, res.trajectory.times)
    assert np.max(np.abs(res.trajectory.nodes[:, 0] - ref)) <= 1e-2
    # the oracle itself reproduces 1/(1+t)
    assert xs[-1] == pytest.approx(0.5, abs=1e-12)


def test_stationary_returns_init():
    p = scenario_params("stationary")
    res = minimize_J(p)
    assert res.value == 0.0 and np.all(res.trajectory.nodes == 0.0)
    assert verify_null_minimum(p, res)["passed"]


def test_truncated_run_fails_verification():
    path = bundled_scenario("quadratic")
    cal = json.loads(path.read_text())["calibration"]
    p = scenario_params("quadratic")
    res = minimize_J(p, opts=SolverOptions(max_iter=cal["truncated_max_iter"]))
    rep = verify_null_minimum(p, res)
    assert not rep["passed"]
    assert rep["value"] >= cal["truncated_min_value"]


def test_verify_reports_all_weights():
    p, res = solved("quadratic")
    rep = verify_null_minimum(p, res)
    assert rep["passed"]
    assert set(rep["J_by_weight"]) == {"0", "1"}
    assert all(abs(v) <= 1e-3 for v in rep["J_by_weight"].values())
    assert rep["certified_interval"] == [-1e-3, 1e-3]


def test_time_dependent_reports_inadmissible_weights():
    p, res = solved("time_dependent")
    rep = verify_null_minimum(p, res, tol_value=1e-2)
    assert rep["J_by_weight"]["0"] is None
    assert rep["passed"]


def test_mm_closed_form_recursion():
    p = scenario_params("quadratic").replace(N=10)
    traj = minimizing_movements(p)
    assert traj.nodes[-1, 0] == pytest.approx(1.1 ** -10, abs=1e-9)
    assert np.allclose(traj.nodes[:, 0], 1.1 ** -np.arange(11), atol=1e-9)


def test_mm_stationary_and_double_well():
    p = scenario_params("stationary")
    assert np.all(minimizing_movements(p).nodes == 0.0)
    dw = scenario_params("double_well_a1")
    assert abs(minimizing_movements(dw).nodes[-1, 0] - DW_TERMINAL) <= 1e-2


@pytest.mark.parametrize("name", ["quadratic", "power_p", "friction"])
def test_solvers_agree(name):
    p = scenario_params(name).replace(N=100)
    res = minimize_J(p)
    mm = minimizing_movements(p)
    assert np.max(np.abs(res.trajectory.nodes - mm.nodes)) <= 5e-2


def test_minimisers_do_not_depend_on_weight():
    p = scenario_params("quadratic").replace(N=100)
    r0 = minimize_J(p)
    r1 = minimize_J(p.replace(a=1.0))
    assert np.max(np.abs(r0.trajectory.nodes - r1.trajectory.nodes)) <= 1e-2


def test_restarts_are_deterministic(monkeypatch):
    p = scenario_params("double_well_a1").replace(N=60)
    monkeypatch.setenv("DGFLOW_THREADS", "1")
    a = minimize_J(p, opts=SolverOptions(restarts=2))
    monkeypatch.setenv("DGFLOW_THREADS", "3")
    b = minimize_J(p, opts=SolverOptions(restarts=2))
    assert np.array_equal(a.trajectory.nodes, b.trajectory.nodes)
    assert len(a.restart_values) == 3


def test_max_threads_env(monkeypatch):
    monkeypatch.setenv("DGFLOW_THREADS", "2")
    assert max_threads() == 2


def test_init_must_start_at_x0():
    p = scenario_params("quadratic")
    bad = Trajectory.constant(np.array([2.0]), p.T, p.N)
    with pytest.raises(ValueError):
        minimize_J(p, init=bad)


def test_lbfgs_stagnation_carries_best_iterate():
    # the gradient lies: no descent direction exists
    def fun(x):
        return float(np.sum(x ** 2)), -2 * x

    with pytest.raises(StagnationError) as info:
        lbfgs(fun, np.array([1.0, -1.0]))
    assert np.array_equal(info.value.best_x, [1.0, -1.0])


def test_result_serialisation(tmp_path):
    _, res = solved("quadratic")
    res.to_json(tmp_path / "r.json")
    res.write_history_csv(tmp_path / "h.csv")
    d = json.loads((tmp_path / "r.json").read_text())
    assert d["value"] == res.value
    assert (tmp_path / "h.csv").read_text().startswith("iter,J,grad_norm\n")
