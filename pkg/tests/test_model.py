import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ekhomog.errors import NonNeutral, NonPositive, ValenceOrder
from ekhomog.model import (ElectrolyteSpec, Forcing, SurfaceCharge, bound_constants, hardy_derivative,
                           hardy_nonlinearity, validate_electrolyte)

BINARY = ElectrolyteSpec((-1, 1), (0.5, 0.5), (1.0, 1.0), 1.0, 1.0)


def test_binary_is_valid_and_returned_unchanged():
    assert validate_electrolyte(BINARY) is BINARY


@pytest.mark.parametrize("z, n_c, exc", [
    ((1, 2), (0.5, 0.5), ValenceOrder),
    ((1, -1), (0.5, 0.5), ValenceOrder),
    ((-1, 0, 1), (0.5, 0.1, 0.5), ValenceOrder),
    ((-1, 1), (0.3, 0.5), NonNeutral),
    ((-1, 1), (0.0, 0.0), NonPositive),
])
def test_invalid_electrolytes(z, n_c, exc):
    with pytest.raises(exc):
        validate_electrolyte(ElectrolyteSpec(z, n_c, (1.0,) * len(z)))


@pytest.mark.parametrize("field, value", [("Pe", (1.0, -1.0)), ("beta", 0.0)])
def test_nonpositive_transport_parameters(field, value):
    kw = dict(z=(-1, 1), n_c=(0.5, 0.5), Pe=(1.0, 1.0), beta=1.0)
    kw[field] = value
    with pytest.raises(NonPositive):
        validate_electrolyte(ElectrolyteSpec(**kw))


def test_validation_is_idempotent():
    spec = ElectrolyteSpec((-2, 1), (0.25, 0.5), (1.0, 2.0), 3.0)
    assert validate_electrolyte(validate_electrolyte(spec)) == spec


def test_hardy_value_at_one():
    # -(-1)(0.5)e^{1} - (1)(0.5)e^{-1}
    assert hardy_nonlinearity(BINARY, 1.0) == pytest.approx(0.5 * (math.e - 1 / math.e), rel=1e-15)
    assert hardy_nonlinearity(BINARY, 1.0) == pytest.approx(1.1752, abs=1e-4)


@st.composite
def neutral_specs(draw):
    zn = draw(st.integers(-3, -1))
    zp = draw(st.integers(1, 3))
    n_neg = draw(st.floats(0.05, 0.9))
    n_pos = -zn * n_neg / zp
    return ElectrolyteSpec((zn, zp), (n_neg, n_pos), (1.0, 1.0))


@settings(max_examples=50, deadline=None)
@given(spec=neutral_specs(), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_hardy_zero_at_origin_and_increasing(spec, a, b):
    assert abs(hardy_nonlinearity(spec, 0.0)) < 1e-12
    lo, hi = min(a, b), max(a, b)
    if hi - lo > 1e-9:
        assert hardy_nonlinearity(spec, hi) > hardy_nonlinearity(spec, lo)
    assert hardy_derivative(spec, a) > 0


def test_hardy_derivative_matches_finite_difference():
    psi = np.linspace(-2, 2, 9)
    h = 1e-6
    fd = (hardy_nonlinearity(BINARY, psi + h) - hardy_nonlinearity(BINARY, psi - h)) / (2 * h)
    np.testing.assert_allclose(hardy_derivative(BINARY, psi), fd, rtol=1e-8)


def test_bound_constant_at_zero_lift():
    b = bound_constants(BINARY, 0.0, 0.0)
    assert b.C_m == pytest.approx(math.log(2.0), rel=1e-15)
    assert b.psi_min <= 0.0 <= b.psi_max


@settings(max_examples=60, deadline=None)
@given(spec=neutral_specs(), vm=st.floats(-2, 0), vM=st.floats(0, 2), widen=st.floats(0, 1))
def test_bounds_bracket_zero_and_widen(spec, vm, vM, widen):
    b = bound_constants(spec, vm, vM)
    assert b.psi_min <= 0.0 <= b.psi_max
    wider = bound_constants(spec, vm - widen, vM + widen)
    assert wider.psi_min <= b.psi_min + 1e-12
    assert wider.psi_max >= b.psi_max - 1e-12


def test_bound_constants_reject_inverted_interval():
    with pytest.raises(ValueError):
        bound_constants(BINARY, 1.0, 0.0)


def test_surface_charge_bound_and_table():
    sc = SurfaceCharge("per-grain", table=(0.1, -0.3))
    assert sc.bound == pytest.approx(0.3)
    np.testing.assert_array_equal(sc.per_grain(2), [0.1, -0.3])
    with pytest.raises(ValueError):
        SurfaceCharge("constant", 0.5, bound=0.1)
    with pytest.raises(ValueError):
        sc.per_grain(3)


def test_forcing_external_potential_consistency():
    good = Forcing(E=(0.3, -1.0), psi_ext=lambda x, y: 0.3 * x - y + 2.0)
    bad = Forcing(E=(0.3, -1.0), psi_ext=lambda x, y: x)
    assert good.check_consistency()
    assert not bad.check_consistency()
    assert Forcing().is_zero
    assert Forcing(E=(1.0, 0.0)).linear_potential(0.5, 0.5) == 0.0
