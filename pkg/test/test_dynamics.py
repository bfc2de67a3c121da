import math

import numpy as np
import pytest

from stab_flow.dynamics import (
    ControlSet,
    c2_constant,
    c3_constant,
    default_substeps,
    drift_difference_norm,
    estimate_lipschitz,
    eval_field,
    flow_segment,
    make_field,
    sampled_lipschitz_ratio,
    sublinear_bound,
)
from stab_flow.errors import ConfigurationError, DimensionMismatchError, FlowBlowUpError, StabError
from stab_flow.measures import EmpiricalMeasure, w2_distance
from stab_flow.sampling import MeasureSampler

ORIGIN = EmpiricalMeasure(np.zeros((1, 2)))


def test_lattice_puts_zero_first():
    """A 3x3 lattice holds nine controls with the zero control at index 0."""
    controls = ControlSet.lattice(2, 1.0, 3)
    assert len(controls) == 9
    assert np.array_equal(controls[0], [0.0, 0.0])
    assert controls.neutral_index == 0


def test_control_set_rejects_duplicates():
    """Duplicate control vectors are a configuration error."""
    with pytest.raises(ConfigurationError):
        ControlSet(np.array([[1.0, 0.0], [1.0, 0.0]]))


def test_unknown_field_label():
    """The error lists the supported labels."""
    with pytest.raises(ConfigurationError, match='linear_steer'):
        make_field('spiral')


def test_rk4_matches_exponential_decay():
    """x' = -x with u = 0 decays as exp(-t) to RK4 accuracy."""
    f = make_field('linear_steer')
    m0 = EmpiricalMeasure(np.array([[1.0, 2.0], [-3.0, 0.5]]))
    segment = flow_segment(m0, f, np.zeros(2), 0.0, 1.0, substeps=100)
    assert segment.times[0] == 0.0
    assert segment.times[-1] == 1.0
    assert len(segment.states) == 101
    assert np.allclose(segment.final.points, m0.points * math.exp(-1.0), rtol=1e-9)


def test_held_control_moves_equilibrium():
    """With u held, particles approach u."""
    f = make_field('linear_steer')
    segment = flow_segment(ORIGIN, f, np.array([1.0, 0.0]), 0.0, 10.0, substeps=1000)
    assert np.allclose(segment.final.points, [[1.0, 0.0]], atol=1e-4)


def test_mean_attract_conserves_mean():
    """Attraction to the mean leaves the mean where it is when u = 0."""
    f = make_field('mean_attract', gain=2.0)
    rng = np.random.default_rng(0)
    m0 = EmpiricalMeasure(rng.normal(size=(30, 2)))
    final = flow_segment(m0, f, np.zeros(2), 0.0, 1.0, substeps=50).final
    assert np.allclose(final.mean(), m0.mean(), atol=1e-12)


def test_segment_bounds():
    """Empty segments are rejected and blow-ups report the last finite time."""
    f = make_field('linear_steer', gain=-1e3)
    with pytest.raises(StabError):
        flow_segment(ORIGIN, f, np.zeros(2), 1.0, 1.0)
    big = EmpiricalMeasure(np.array([[1e300, 0.0]]))
    with pytest.raises(FlowBlowUpError) as blow_up:
        flow_segment(big, f, np.zeros(2), 0.0, 1.0, substeps=1)
    assert blow_up.value.exit_code == 4
    assert default_substeps(0.0, 0.05, 0.01) == 5


def test_speed_bound_holds_along_segment():
    """W2(m_t, m_0) stays below C2 t for a segment starting in B_R."""
    f = make_field('linear_steer')
    controls = ControlSet.lattice(2, 1.0, 3)
    sampler = MeasureSampler(ORIGIN, 40, 1)
    c0 = estimate_lipschitz(f, sampler, controls)
    c1 = sublinear_bound(f, c0, controls, 2)
    m0 = sampler.at_distance(2.0)
    c2 = c2_constant(2.0, 0.1, c1, 0.0)
    segment = flow_segment(m0, f, controls[4], 0.0, 0.1, substeps=10)
    for t, state in zip(segment.times[1:], segment.states[1:], strict=True):
        assert w2_distance(m0, state) <= c2 * t + 1e-12
        assert drift_difference_norm(f, m0, state, controls[4]) <= c3_constant(2.0, 0.1, c0, c1, 0.0) * t + 1e-12


def test_lipschitz_estimates():
    """The analytic constant wins and the sampled ratio stays below it."""
    f = make_field('linear_steer', gain=1.5)
    controls = ControlSet.lattice(2, 1.0, 3)
    sampler = MeasureSampler(ORIGIN, 20, 2)
    assert estimate_lipschitz(f, sampler, controls) == 1.5
    assert sampled_lipschitz_ratio(f, sampler, controls, trials=50) <= 1.5 + 1e-9
    declared = make_field('linear_steer', declared_c0=0.1)
    assert declared.c0 == 0.1


def test_eval_field_reads_the_measure():
    """mean_attract pulls a point towards the mean of the measure."""
    f = make_field('mean_attract', gain=1.0)
    m = EmpiricalMeasure(np.array([[2.0, 0.0], [0.0, 2.0]]))
    assert np.allclose(eval_field(f, np.zeros(2), m, np.array([0.5, 0.0])), [1.5, 1.0])
    with pytest.raises(DimensionMismatchError):
        eval_field(f, np.zeros(3), m, np.zeros(2))
