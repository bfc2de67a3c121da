import math

import numpy as np
import pytest

from stab_flow.dynamics import ControlSet, make_field
from stab_flow.errors import ConfigurationError, UnsupportedCLPError
from stab_flow.lyapunov import (
    ControlLyapunovPair,
    builtin_quadratic_clp,
    calibrate_eps0,
    clp_condition4_check,
    clp_invariants,
    delta_annulus,
    derived_constants,
    gradient_lift,
    level_set_inclusion_holds,
    moduli_table,
    modulus_i,
    modulus_s,
    omega_modulus,
    radius_rcal,
    shrunk_gradient_lift,
)
from stab_flow.measures import EmpiricalMeasure
from stab_flow.sampling import MeasureSampler

ORIGIN = EmpiricalMeasure(np.zeros((1, 2)))
CONTROLS = ControlSet.lattice(2, 1.0, 3)
FIELD = make_field('linear_steer')


def _quadratic() -> ControlLyapunovPair:
    return builtin_quadratic_clp(ORIGIN, CONTROLS, FIELD)


def _sampled_quadratic() -> ControlLyapunovPair:
    """The built-in pair with its closed forms switched off"""
    clp = _quadratic()
    return ControlLyapunovPair(clp.phi, clp.phi_grad, clp.psi_fn, clp.eps0, clp.target)


def test_builtin_pair_values():
    """phi is half the second moment and its gradient is the identity."""
    clp = _quadratic()
    m = EmpiricalMeasure(np.array([[1.0, 0.0], [0.0, 3.0]]))
    assert clp.phi(m) == pytest.approx(2.5)
    assert np.array_equal(clp.phi_grad(m), m.points)
    assert clp.psi(m, 0.5) == pytest.approx(2.5 * 1.5)


def test_builtin_pair_coverage():
    """Other targets and fields are refused."""
    with pytest.raises(UnsupportedCLPError):
        builtin_quadratic_clp(EmpiricalMeasure(np.ones((1, 2))), CONTROLS, FIELD)
    with pytest.raises(UnsupportedCLPError):
        builtin_quadratic_clp(ORIGIN, CONTROLS, make_field('zero'))


def test_closed_form_moduli():
    """S = I = R^2/2 and Rcal = R/sqrt(2) for the quadratic pair."""
    table = moduli_table(_quadratic(), 2.0, 1e-3)
    assert table.S == pytest.approx(2.0)
    assert table.I == pytest.approx(2.0)
    assert table.Rcal == pytest.approx(math.sqrt(2))
    assert table.M_e == pytest.approx(2.0 + math.sqrt(4.0 + 1e-6))
    assert table.omega(0.1) == pytest.approx(0.1 * table.M_e + 0.005)


def test_sampled_rcal_is_conservative():
    """Sampled Rcal stays below the exact value and within a few percent of it."""
    sampler = MeasureSampler(ORIGIN, 20, 5)
    rcal = radius_rcal(_sampled_quadratic(), 2.0, sampler, samples=64)
    assert rcal <= math.sqrt(2)
    assert rcal > 0.8 * math.sqrt(2)


def test_delta_for_local_scenario():
    """Delta(0.2, 2) is a third of phi on the sphere of radius Rcal(0.2)/2."""
    clp = _quadratic()
    delta = delta_annulus(clp, radius_rcal(clp, 0.2), 5.0)
    assert delta == pytest.approx(0.2**2 / 16 / 3, rel=1e-5)
    assert delta == pytest.approx(8.33e-4, rel=1e-2)


def test_derived_constants_bounds():
    """M_ke stays below kappa sqrt(2S) and N_ke vanishes with eps."""
    clp = _quadratic()
    table = moduli_table(clp, 2.0, 1e-3)
    constants = derived_constants(clp, table, 0.25, 1e-3, 0.2, 2.0)
    assert 0 < constants.M_ke <= 0.25 * math.sqrt(2 * table.S)
    assert derived_constants(clp, table, 0.25, 0.0, 0.2, 2.0).N_ke == 0.0
    assert constants.Delta > 0
    with pytest.raises(ConfigurationError):
        derived_constants(clp, table, 1.5, 1e-3, 0.2, 2.0)
    with pytest.raises(ConfigurationError):
        derived_constants(clp, table, 0.25, 1e-3, 3.0, 2.0)


def test_level_set_inclusion_small_kappa():
    """A small kappa and eps satisfy the sufficient condition, kappa = 1 does not."""
    clp = _quadratic()
    table = moduli_table(clp, 2.0, 1e-3)
    assert level_set_inclusion_holds(table, derived_constants(clp, table, 0.05, 1e-4, 0.2, 2.0))
    assert not level_set_inclusion_holds(table, derived_constants(clp, table, 1.0, 1e-3, 0.2, 2.0))


def test_condition4_holds_with_zero_control():
    """With the zero control available the gradient pairing is at most -2 phi."""
    clp = _quadratic()
    sampler = MeasureSampler(ORIGIN, 30, 6)
    for _ in range(10):
        m = sampler.annulus(0.1, 2.0)
        assert clp_condition4_check(clp, FIELD, CONTROLS, m, 1e-3, [gradient_lift(clp, m)]).passed


def test_condition4_fails_without_a_good_control():
    """A lone control pushing away from the target breaks the decrease condition."""
    controls = ControlSet(np.array([[1.0, 0.0]]))
    clp = builtin_quadratic_clp(ORIGIN, controls, FIELD)
    m = EmpiricalMeasure(np.array([[0.5, 0.0]]))
    assert not clp_condition4_check(clp, FIELD, controls, m, 1e-3, [gradient_lift(clp, m)]).passed


def test_calibration_keeps_a_valid_eps0():
    """eps0 that already works far from the target is returned unchanged."""
    clp = _quadratic()
    calibrated = calibrate_eps0(clp, FIELD, CONTROLS, MeasureSampler(ORIGIN, 20, 7), 2.0, 4.0, trials=8)
    assert calibrated.eps0 == clp.eps0


def test_calibration_shrinks_eps0_near_the_target():
    """Near the target the eps-shrunk lift fails until eps0 / 2 drops to about a quarter of W2."""
    clp = _quadratic()
    calibrated = calibrate_eps0(clp, FIELD, CONTROLS, MeasureSampler(ORIGIN, 20, 7), 0.1, 0.4, trials=16)
    assert 1 / 32 <= calibrated.eps0 < clp.eps0


def test_shrunk_lift_is_an_eps_subgradient():
    """The shrunk lift moves every covector by exactly eps in L2(m)."""
    clp = _quadratic()
    m = MeasureSampler(ORIGIN, 10, 2).at_distance(1.5)
    shift = gradient_lift(clp, m).covectors - shrunk_gradient_lift(clp, m, 0.2).covectors
    assert math.sqrt(float(np.mean(np.sum(shift * shift, axis=1)))) == pytest.approx(0.2)


def test_pair_invariants():
    """phi vanishes at the target, is positive elsewhere, psi grows with eps."""
    results = clp_invariants(_quadratic(), MeasureSampler(ORIGIN, 20, 8), 2.0, trials=16)
    assert [result.name for result in results] == [
        'phi_zero_at_target',
        'phi_positive_off_target',
        'psi_positive_off_target',
        'psi_monotone_in_eps',
    ]
    assert all(result.passed for result in results)


def test_moduli_one_by_one():
    """Each modulus has its closed form, and omega vanishes at zero scale."""
    clp = _quadratic()
    assert modulus_s(clp, 3.0) == pytest.approx(4.5)
    assert modulus_i(clp, 3.0) == pytest.approx(4.5)
    assert omega_modulus(clp, 2.0, 0.0, 0.0) == 0.0
    assert omega_modulus(clp, 2.0, 0.0, 0.1) == pytest.approx(0.1 * 4.0 + 0.005)
