import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgflow.convex_core import (DimensionError, DissipationPotential, DomainError,
                                UnboundedConjugateError, conjugate, conjugate_gradient, evaluate,
                                fenchel_gap, numeric_conjugate, subdifferential_select)

FAMILIES = {
    "quadratic": DissipationPotential.quadratic(1.0),
    "quadratic2": DissipationPotential.quadratic(2.0),
    "power1.5": DissipationPotential.power(1.5),
    "power3": DissipationPotential.power(3.0),
    "entropy": DissipationPotential.entropy(),
}

finite = st.floats(-20, 20, allow_nan=False)


def test_examples_evaluate_and_conjugate():
    assert evaluate(DissipationPotential.power(1.5), 0, None, [2.0]) == pytest.approx(2 ** 1.5 / 1.5)
    assert conjugate(DissipationPotential.entropy(), 0, None, [1.0]) == pytest.approx(math.e)
    assert conjugate(DissipationPotential.quadratic(), 0, None, [0.0]) == 0.0
    assert conjugate(DissipationPotential.power(1.5), 0, None, [1.0]) == pytest.approx(1 / 3)


def test_power_conjugate_against_numeric_oracle():
    val, _ = numeric_conjugate(lambda v: abs(v[0]) ** 1.5 / 1.5, [1.0])
    assert val == pytest.approx(1 / 3, abs=1e-9)


def test_subdifferential_examples():
    assert subdifferential_select(DissipationPotential.quadratic(2.0), 0, None, [3.0]) == pytest.approx([6.0])
    assert subdifferential_select(DissipationPotential.power(2.0), 0, None, [-1.0]) == pytest.approx([-1.0])
    assert subdifferential_select(DissipationPotential.entropy(), 0, None, [1.0]) == pytest.approx([0.0])
    with pytest.raises(DomainError):
        subdifferential_select(DissipationPotential.entropy(), 0, None, [-1.0])
    with pytest.raises(DomainError):
        subdifferential_select(DissipationPotential.entropy(), 0, None, [0.0])


def test_kink_selects_minimal_norm():
    pot = DissipationPotential.custom(lambda v: abs(v[0]) + v[0] ** 2 / 2)
    assert subdifferential_select(pot, 0, None, [0.0]) == pytest.approx([0.0], abs=1e-6)


def test_fenchel_gap_examples():
    q = DissipationPotential.quadratic()
    assert fenchel_gap(q, 0, None, [1.0], [1.0]) == pytest.approx(0.0, abs=1e-15)
    assert fenchel_gap(q, 0, None, [1.0], [0.0]) == pytest.approx(0.5)
    p = DissipationPotential.power(1.5)
    assert fenchel_gap(p, 0, None, [2.0], [2 ** 0.5]) == pytest.approx(0.0, abs=1e-12)


def test_dimension_errors():
    with pytest.raises(DimensionError):
        evaluate(DissipationPotential.quadratic(dim=2), 0, None, [1.0])


def test_unbounded_custom_conjugate():
    with pytest.raises(UnboundedConjugateError):
        numeric_conjugate(lambda v: abs(v[0]), [2.0])


@pytest.mark.parametrize("name", sorted(FAMILIES))
@settings(max_examples=60, deadline=None)
@given(v=finite, z=finite)
def test_fenchel_young_nonnegative(name, v, z):
    pot = FAMILIES[name]
    if name == "entropy":
        v = abs(v)
        z = min(z, 5.0)
    assert fenchel_gap(pot, 0, None, [v], [z]) >= -1e-10


@pytest.mark.parametrize("name", sorted(FAMILIES))
def test_subgradient_saturates_gap(name):
    pot = FAMILIES[name]
    vs = np.linspace(0.05, 4, 40) if name == "entropy" else np.linspace(-4, 4, 41)
    for v in vs:
        z = subdifferential_select(pot, 0, None, [v])
        assert fenchel_gap(pot, 0, None, [v], z) <= 1e-8


@pytest.mark.parametrize("name", sorted(FAMILIES))
def test_biconjugation(name, rng):
    pot = FAMILIES[name]
    vs = rng.uniform(0.05, 3, 100) if name == "entropy" else rng.uniform(-3, 3, 100)
    for v in vs:
        z0 = float(np.asarray(subdifferential_select(pot, 0, None, [v]))[0])
        val, _ = numeric_conjugate(lambda z: float(conjugate(pot, 0, None, z)) if abs(z[0]) < 60 else math.inf,
                                   [v], radius=max(4 * abs(z0), 10.0))
        assert val == pytest.approx(float(evaluate(pot, 0, None, [v])), abs=1e-6)


@pytest.mark.parametrize("name", sorted(FAMILIES))
def test_conjugate_midpoint_convex(name, rng):
    pot = FAMILIES[name]
    a, b = rng.uniform(-3, 3, (2, 200, 1))
    mid = conjugate(pot, 0, None, 0.5 * (a + b))
    avg = 0.5 * (conjugate(pot, 0, None, a) + conjugate(pot, 0, None, b))
    assert np.all(mid <= avg + 1e-10)


@pytest.mark.parametrize("k", [-1.0, 0.5, 3.0])
def test_shift_rule(k, rng):
    pot = DissipationPotential.power(1.5)
    z = rng.uniform(-3, 3, (50, 1))
    assert np.array_equal(conjugate(pot.shifted(k), 0, None, z), conjugate(pot, 0, None, z) - k)


def test_custom_matches_closed_form():
    cust = DissipationPotential.custom(lambda v: abs(v[0]) ** 1.5 / 1.5)
    for z in (-2.0, 0.3, 1.0):
        assert conjugate(cust, 0, None, [z]) == pytest.approx(abs(z) ** 3 / 3, abs=1e-7)


def test_conjugate_gradient_is_maximiser():
    pot = DissipationPotential.power(1.5)
    z = np.array([[0.7], [-1.3]])
    v = conjugate_gradient(pot, 0, None, z)
    assert np.allclose(fenchel_gap(pot, 0, None, v, z), 0, atol=1e-12)


def test_friction_scaling():
    from dgflow.energy_models import FrictionField
    fr = FrictionField.from_expr("2 + 0*x", 1.0, 3.0)
    pot = DissipationPotential.quadratic().with_friction(fr)
    assert evaluate(pot, 0.0, [0.0], [1.0]) == pytest.approx(1.0)
    assert conjugate(pot, 0.0, [0.0], [2.0]) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        conjugate(pot, 0.0, None, [1.0])


def test_spec_roundtrip():
    for pot in FAMILIES.values():
        again = DissipationPotential.from_spec(pot.to_spec())
        assert again.to_spec() == pot.to_spec()
