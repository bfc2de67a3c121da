import math

import numpy as np
import pytest

from stab_flow.dynamics import ControlSet, make_field
from stab_flow.errors import ConfigurationError
from stab_flow.lyapunov import builtin_quadratic_clp
from stab_flow.measures import EmpiricalMeasure
from stab_flow.proximal import inf_convolution
from stab_flow.stabilize import (
    COLUMNS,
    Partition,
    TrajectoryLog,
    TrajectoryOptions,
    constant_feedback,
    extremal_shift_choice,
    extremal_shift_control,
    local_feedback,
    make_partition,
    run_theta_trajectory,
)

ORIGIN = EmpiricalMeasure(np.zeros((1, 2)))
CONTROLS = ControlSet.lattice(2, 1.0, 3)
FIELD = make_field('linear_steer')
CLP = builtin_quadratic_clp(ORIGIN, CONTROLS, FIELD)
START = EmpiricalMeasure(np.array([[2.0, 0.0], [0.0, 2.0], [-2.0, 0.0], [0.0, -2.0], [1.2, 1.6]]))


def test_uniform_partition():
    """Uniform steps use the fewest knots that respect delta_max."""
    partition = make_partition(0.025, 0.05, 1.0)
    assert len(partition.times) == 21
    assert partition.horizon == 1.0
    assert np.allclose(partition.steps, 0.05)


def test_jittered_partition_respects_bounds():
    """Every jittered step lies in [delta_min, delta_max] and the knots cover the horizon."""
    partition = make_partition(0.02, 0.05, 1.0, rule='jittered', seed=3)
    assert partition.horizon >= 1.0 - 1e-12
    assert np.all(partition.steps >= 0.02)
    assert np.all(partition.steps <= 0.05)
    assert make_partition(0.02, 0.05, 1.0, rule='jittered', seed=3).times == partition.times


def test_partition_rejections():
    """Bad bounds, rules and step lists are configuration errors."""
    with pytest.raises(ConfigurationError):
        make_partition(0.1, 0.05, 1.0)
    with pytest.raises(ConfigurationError):
        make_partition(2.0, 3.0, 1.0)
    with pytest.raises(ConfigurationError, match='uniform'):
        make_partition(0.01, 0.05, 1.0, rule='geometric')
    with pytest.raises(ConfigurationError):
        Partition(times=(0.0, 0.1, 0.3), delta_min=0.05, delta_max=0.1)


def test_extremal_shift_picks_opposing_control():
    """A single particle at (1, 1) is steered by (-1, -1)."""
    m = EmpiricalMeasure(np.array([[1.0, 1.0]]))
    result = inf_convolution(CLP, 0.5, 1e-6, m)
    index, objectives = extremal_shift_choice(m, result.minimizer, result.plan, FIELD, CONTROLS, 0.5)
    assert np.array_equal(CONTROLS[index], [-1.0, -1.0])
    assert objectives[index] == objectives.min()
    assert objectives[CONTROLS.neutral_index] > objectives[index]


def test_extremal_shift_ties_go_to_earliest():
    """At the target every control scores zero and the zero control wins."""
    result = inf_convolution(CLP, 0.5, 1e-6, ORIGIN)
    index, _ = extremal_shift_choice(ORIGIN, result.minimizer, result.plan, FIELD, CONTROLS, 0.5)
    assert index == 0


def test_extremal_shift_control_returns_the_vector():
    """With f = u in one dimension a positive mean covector picks u = -1."""
    origin = EmpiricalMeasure(np.zeros((1, 1)))
    controls = ControlSet(np.array([[-1.0], [0.0], [1.0]]))
    clp = builtin_quadratic_clp(origin, controls, make_field('linear_steer'))
    m = EmpiricalMeasure(np.array([[1.0], [3.0]]))
    result = inf_convolution(clp, 1.0, 1e-9, m)
    pushed = make_field('mean_drift', gain=0.0)
    control = extremal_shift_control(m, result.plan, pushed, controls, 1.0, minimizer=result.minimizer)
    assert control.tolist() == [-1.0]


def test_constant_feedback():
    """The open loop always returns its control and refuses foreign indices."""
    policy = constant_feedback(CONTROLS, 3)
    assert np.array_equal(policy.control_of(START), CONTROLS[3])
    assert policy.decide(START).control_index == 3
    with pytest.raises(ConfigurationError):
        constant_feedback(CONTROLS, len(CONTROLS))


def test_zero_control_trajectory_decays():
    """Holding u = 0 on the linear field scales W2 by exp(-t)."""
    partition = make_partition(0.05, 0.1, 0.5)
    log = run_theta_trajectory(START, partition, constant_feedback(CONTROLS, 0), FIELD, TrajectoryOptions(CLP))
    knots = log.knots()
    assert [record.t for record in knots] == list(partition.times)
    assert knots[-1].w2_to_target == pytest.approx(2.0 * math.exp(-0.5), rel=1e-8)
    assert len(log.states) == len(log.records)
    assert all(math.isnan(record.lemma52_margin) for record in log.records)


def test_local_feedback_decreases_phi():
    """The closed loop lowers phi between the first and last knots."""
    policy = local_feedback(CLP, FIELD, CONTROLS, 0.5, 1e-4)
    log = run_theta_trajectory(START, make_partition(0.05, 0.05, 0.5), policy, FIELD, TrajectoryOptions(CLP))
    knots = log.knots()
    assert knots[-1].phi < knots[0].phi
    assert all(0 <= record.control_id < len(CONTROLS) for record in log.records)


def test_trajectory_csv_round_trip(tmp_path):
    """Written logs read back record for record and repeat runs are byte-identical."""
    partition = make_partition(0.1, 0.1, 0.3)
    policy = local_feedback(CLP, FIELD, CONTROLS, 0.5, 1e-4)
    first = tmp_path / 'first.csv'
    second = tmp_path / 'second.csv'
    log = run_theta_trajectory(START, partition, policy, FIELD, TrajectoryOptions(CLP, substeps=4))
    log.to_csv(str(first))
    run_theta_trajectory(START, partition, policy, FIELD, TrajectoryOptions(CLP, substeps=4)).to_csv(str(second))
    assert first.read_bytes() == second.read_bytes()
    assert first.read_text().splitlines()[0] == ','.join(COLUMNS)

    back = TrajectoryLog.from_csv(str(first), list(partition.times), START.n, START.dim)
    assert len(back.records) == len(log.records)
    for name in COLUMNS:
        assert np.array_equal(back.column(name), log.column(name), equal_nan=True)


def test_snapshots_follow_stride(tmp_path):
    """Every stride-th state is written, none when the stride is zero."""
    partition = make_partition(0.1, 0.1, 0.2)
    log = run_theta_trajectory(
        START, partition, constant_feedback(CONTROLS, 0), FIELD, TrajectoryOptions(CLP, substeps=5)
    )
    assert len(log.states) == 11
    assert len(log.write_snapshots(str(tmp_path / 'snaps'), 5)) == 3
    assert log.write_snapshots(str(tmp_path / 'none'), 0) == []
