import math
from dataclasses import replace

import numpy as np
import pytest

from stab_flow.dynamics import ControlSet, make_field
from stab_flow.errors import ConfigurationError, OutOfRangeError
from stab_flow.lyapunov import builtin_quadratic_clp
from stab_flow.measures import EmpiricalMeasure
from stab_flow.shells import ShellRow, ShellTable, global_feedback, shell_descent_checks, shell_radii

ORIGIN = EmpiricalMeasure(np.zeros((1, 2)))
CONTROLS = ControlSet.lattice(2, 1.0, 3)
FIELD = make_field('linear_steer')
CLP = builtin_quadratic_clp(ORIGIN, CONTROLS, FIELD)
RATIO = 2 * math.sqrt(2) * (1 + 1e-9)


def _row(index: int) -> ShellRow:
    big = RATIO**index
    inner = RATIO ** (index - 1)
    return ShellRow(
        index=index,
        Q=big,
        q=inner / (2 * math.sqrt(2)),
        Rcal_Q=big / math.sqrt(2),
        Rcal_q=inner / 4,
        level=big**2 / 4,
        kappa=0.25,
        eps=1e-3 * big,
        delta_min=0.025,
        delta_max=0.05,
        T=3.0,
        C2=2 * big + 2,
        Delta=big**2 / 48,
        N_ke=1e-6,
        step_bound=0.05,
        certified=False,
        certified_kappa=0.1,
        certified_eps=1e-4,
        certified_delta_max=0.01,
        certified_T=30.0,
    )


def _table(i_min: int = -4, i_max: int = 4) -> ShellTable:
    return ShellTable(rows=tuple(_row(i) for i in range(i_min, i_max + 1)), below=RATIO ** (i_min - 1))


def test_quadratic_radii_grow_by_two_root_two():
    """Rcal(Q) = Q / sqrt(2) gives Q_i = (2 sqrt 2)^i on both sides of Q_0."""
    radii = shell_radii(CLP, 1.0, -2, 2)
    assert sorted(radii) == [-3, -2, -1, 0, 1, 2]
    for i, radius in radii.items():
        assert radius == pytest.approx((2 * math.sqrt(2)) ** i, rel=1e-9)
    for i in range(0, 2):
        assert radii[i + 1] / math.sqrt(2) >= 2 * radii[i]


def test_radii_argument_checks():
    """Q0 must be positive and the index range must straddle zero."""
    with pytest.raises(ConfigurationError):
        shell_radii(CLP, 0.0, -1, 1)
    with pytest.raises(ConfigurationError):
        shell_radii(CLP, 1.0, 0, 2)


def test_global_statement_quantities():
    """N(24) = 4, M(24) = Q_4 and K(0.2) = -2 for the doubling ladder."""
    table = _table()
    assert table.n_of(24.0) == 4
    assert table.m_of(24.0) == pytest.approx(64.0, rel=1e-6)
    assert table.k_of(0.2) == -2
    assert table.sampling_step(0.2, 24.0) == pytest.approx(min(0.05, table.q_value(-3) / table.row(4).C2))
    with pytest.raises(OutOfRangeError) as outside:
        table.n_of(1e3)
    assert outside.value.exit_code == 3
    with pytest.raises(OutOfRangeError):
        table.k_of(1e-4)


def test_invariants_hold_and_break():
    """The ladder passes every invariant, a shrunken outer shell breaks doubling."""
    assert all(result.passed for result in _table().invariant_checks())
    rows = list(_table().rows)
    rows[-1] = replace(_row(4), Q=20.0, Rcal_Q=20.0 / math.sqrt(2))
    broken = ShellTable(rows=tuple(rows), below=_table().below)
    results = {result.name: result for result in broken.invariant_checks()}
    assert not results['shells_doubling'].passed


def test_table_needs_consecutive_rows():
    """Gaps in the shell indices are rejected."""
    with pytest.raises(ConfigurationError):
        ShellTable(rows=(_row(0), _row(2)), below=1.0)
    with pytest.raises(OutOfRangeError):
        _table().row(9)


def test_table_files_round_trip(tmp_path):
    """JSON reads back to an equal table, CSV carries the doubling flag."""
    table = _table()
    path = str(tmp_path / 'shells.json')
    table.to_json(path)
    assert ShellTable.from_json(path) == table
    table.to_csv(str(tmp_path / 'shells.csv'))
    lines = (tmp_path / 'shells.csv').read_text().splitlines()
    assert lines[0].startswith('index,Q,q,')
    assert lines[0].endswith('doubling_holds')
    assert len(lines) == 1 + len(table.rows)


def test_global_feedback_dispatches_by_level_set():
    """A Dirac at distance 3 belongs to shell 2, the target takes the fallback."""
    policy = global_feedback(_table(), CLP, FIELD, CONTROLS)
    decision = policy.decide(EmpiricalMeasure(np.array([[3.0, 0.0]])))
    assert decision.shell == 2
    assert decision.diagnostics.R == pytest.approx(RATIO**2)
    at_target = policy.decide(ORIGIN)
    assert at_target.shell is None
    assert at_target.control_index == CONTROLS.neutral_index
    with pytest.raises(OutOfRangeError):
        policy.decide(EmpiricalMeasure(np.array([[100.0, 0.0]])))


def test_shell_descent_checks():
    """Descending knots pass, climbing back to an outer shell fails."""
    table = _table()
    knots = [(0.0, 2, 5.0), (1.0, 1, 2.0), (2.0, 0, 0.5), (3.0, -1, 0.2)]
    results = {result.name: result for result in shell_descent_checks(knots, table, 0.2, 3.0)}
    assert results['shell_index_monotone'].passed
    assert results['shell_dwell'].passed
    assert results['shell_invariance'].passed
    climbing = [(0.0, 1, 2.0), (1.0, 2, 5.0)]
    results = {result.name: result for result in shell_descent_checks(climbing, table, 0.2, 1.0)}
    assert not results['shell_index_monotone'].passed
    assert not results['shell_invariance'].passed
