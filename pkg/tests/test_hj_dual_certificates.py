import json

import numpy as np
import pytest

from conftest import scenario_params, solved
from dgflow.hj_dual_certificates import (CylinderSubsolution, DualOptions, SampleSpec, _repair,
                                         canonical_certificate, check_backward_bound,
                                         check_hj_feasible, dual_value, maximize_dual,
                                         save_certificate)

BUILTIN = ["quadratic", "power_p", "double_well_a0", "double_well_a1", "friction",
           "time_dependent", "stationary"]
SMALL = SampleSpec(n_grid=61, n_halton=2000)


@pytest.fixture(scope="module")
def quad_dual():
    p = scenario_params("quadratic")
    return p, maximize_dual(p)


def zero_certificate(p):
    return CylinderSubsolution.affine(p.T, p.dim, 6)


@pytest.mark.parametrize("name", BUILTIN)
def test_canonical_certificate_is_tight(name):
    p = scenario_params(name)
    rep = check_hj_feasible(p, canonical_certificate(p))
    assert rep.feasible
    assert rep.max_violation_hj <= 1e-8 and rep.max_violation_terminal <= 1e-8
    assert rep.samples_checked == 201 * 201 + 10_000 + 4 * 201 + 10_000
    if not p.energy.time_dependent:
        assert dual_value(p, canonical_certificate(p)) == pytest.approx(0.0, abs=1e-14)


def test_zero_certificate_quadratic(quad):
    xi = zero_certificate(quad)
    assert check_hj_feasible(quad, xi).feasible
    assert dual_value(quad, xi) == pytest.approx(-0.5)


def test_shifted_canonical_breaks_terminal_bound(quad):
    rep = check_hj_feasible(quad, canonical_certificate(quad, shift=1.0))
    assert rep.max_violation_terminal == pytest.approx(1.0)
    assert not rep.feasible


def test_backward_bound_examples(quad):
    rep = check_backward_bound(quad, canonical_certificate(quad))
    assert rep["bound_holds"] and rep["min_slack"] == pytest.approx(0.0, abs=1e-14)
    assert rep["passed"] and not rep["vacuous"]
    low = check_backward_bound(quad, canonical_certificate(quad, shift=-0.1))
    assert low["min_slack"] == pytest.approx(0.1) and low["max_slack"] == pytest.approx(0.1)
    for d in rep["perturbation"].values():
        assert d["ok"]
    bad = check_backward_bound(quad, canonical_certificate(quad, shift=1.0))
    assert bad["vacuous"]


def test_quadratic_dual_ascent(quad_dual):
    p, (xi, value, rep) = quad_dual
    assert -1e-3 <= value <= 1e-6
    assert rep.feasible and not rep.falsified
    assert xi.n_params <= 200
    bb = check_backward_bound(p, xi)
    assert bb["bound_holds"] and bb["min_slack"] >= -1e-8
    # close to exp(-t) * x^2 / 2 around the flow
    t = np.linspace(0, 1, 11)
    x = np.exp(-t)[:, None]
    assert np.max(np.abs(xi.value(t, x) - x[:, 0] ** 2 / 2)) <= 5e-2


def test_weak_duality_pairs(quad_dual):
    p, (xi, value, rep) = quad_dual
    _, direct = solved("quadratic")
    assert value <= direct.value + 1e-6


def test_stationary_dual():
    p = scenario_params("stationary")
    opts = DualOptions(rounds=2, iters_per_round=100, exchange=1)
    xi, value, rep = maximize_dual(p, opts=opts)
    assert -1e-6 <= value <= 1e-6


def test_double_well_tensor_dual():
    p = scenario_params("double_well_a1")
    xi, value, rep = maximize_dual(p, opts=DualOptions(family="tensor"))
    assert -0.05 <= value <= 1e-3
    _, direct = solved("double_well_a1")
    assert value <= direct.value + 1e-3


@pytest.mark.parametrize("seed", range(8))
def test_feasible_random_certificates_are_bounded(seed, quad):
    """Backward boundedness: any repaired (hence feasible) certificate stays below exp(-at) phi."""
    rng = np.random.default_rng(seed)
    for p in (quad, scenario_params("double_well_a1")):
        base = CylinderSubsolution.affine(p.T, 1, 6, coef=rng.normal(0, 0.5, 12))
        t, x, xT = SMALL.points(p)
        box = SMALL.box_for(p)
        xi, _, _ = _repair(p, base, t, x, xT, box, 16)
        if not check_hj_feasible(p, xi, SMALL).feasible:
            continue
        rep = check_backward_bound(p, xi, SMALL)
        assert not rep["counterexample"]


def test_sample_robustness(quad):
    s = 3.0  # s * exp(-1) > 1, so both the HJ and the terminal constraint are violated
    scaled = CylinderSubsolution.from_callables(
        1.0, lambda t, y: s * np.exp(-t) * y[..., 0] ** 2 / 2,
        lambda t, y: -s * np.exp(-t) * y[..., 0] ** 2 / 2,
        lambda t, y: s * np.exp(-t)[..., None] * y, np.eye(1))
    coarse = SampleSpec(n_grid=101, n_halton=5000)
    r1 = check_hj_feasible(quad, scaled, coarse)
    r2 = check_hj_feasible(quad, scaled, coarse.doubled())
    for a, b in ((r1.max_violation_hj, r2.max_violation_hj),
                 (r1.max_violation_terminal, r2.max_violation_terminal)):
        assert a > 0 and abs(b - a) <= 0.5 * abs(a)


def test_serialisation_roundtrip(tmp_path, quad_dual):
    p, (xi, value, rep) = quad_dual
    save_certificate(xi, rep, tmp_path / "c.json", value)
    d = json.loads((tmp_path / "c.json").read_text())
    back = CylinderSubsolution.from_dict(d)
    t = np.linspace(0, 1, 7)
    x = np.linspace(-1, 2, 7)[:, None]
    assert np.array_equal(back.value(t, x), xi.value(t, x))
    assert d["feasibility"]["feasible"] and set(d["bounds"]) == {"zeta", "d_t", "d_y"}


def test_time_shift_is_exact(quad):
    xi = CylinderSubsolution.tensor(1.0, (-2.0, 4.0), 6, 8, coef=np.random.default_rng(0).normal(size=48))
    sh = xi.with_coef(xi.time_shift_coefficients(0.3, 0.2))
    t = np.linspace(0, 1, 9)
    x = np.linspace(-2, 4, 9)[:, None]
    assert np.allclose(sh.value(t, x) - xi.value(t, x), 0.3 * (t - 1.0) - 0.2, atol=1e-13)


def test_design_matrices_match_evaluation(rng):
    for xi in (CylinderSubsolution.affine(2.0, 2, 7, coef=rng.normal(size=21)),
               CylinderSubsolution.tensor(2.0, (-3.0, 3.0), 5, 9, coef=rng.normal(size=45))):
        t = rng.uniform(0, 2, 50)
        x = rng.uniform(-3, 3, (50, xi.dim))
        A0, At, Ai = xi.design(t, x)
        z, zt, zy = xi._parts(t, x)
        assert np.allclose(A0 @ xi.coef, z) and np.allclose(At @ xi.coef, zt)
        for i, A in enumerate(Ai):
            assert np.allclose(A @ xi.coef, zy[:, i])


def test_parameter_cap():
    p = scenario_params("quadratic")
    with pytest.raises(ValueError):
        maximize_dual(p, opts=DualOptions(n_basis=150))
