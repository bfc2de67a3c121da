import math

import pytest

from stab_flow.checks import FAIL, INSUFFICIENT, PASS
from stab_flow.errors import StabError
from stab_flow.stabilize import TrajectoryLog, TrajectoryRecord
from stab_flow.verdicts import (
    bound_margin_checks,
    entry_check,
    first_entry_checks,
    knot_decrease_check,
    local_stabilization_check,
    time_to_ball,
)


def _log(rows: list[tuple[float, float, float]], knots: list[float] | None = None, **margins) -> TrajectoryLog:
    """rows of (t, w2_to_target, phi_kappa); every row is a knot unless knots are given"""
    log = TrajectoryLog(particles=1, dim=2, knot_times=knots if knots is not None else [t for t, _, _ in rows])
    for t, w2, phi_kappa in rows:
        log.append(
            TrajectoryRecord(
                t=t,
                control_id=0,
                phi=w2**2 / 2,
                phi_kappa=phi_kappa,
                w2_to_target=w2,
                shell_index=None,
                lemma52_margin=margins.get('lemma52', math.nan),
                lemma53_margin=margins.get('lemma53', math.nan),
                prop26_margin=margins.get('prop26', math.nan),
            ),
            None,
        )
    return log


DECAYING = _log([(0.0, 2.0, 1.6), (1.0, 1.0, 0.4), (2.0, 0.5, 0.1), (3.0, 0.1, 0.004), (4.0, 0.05, 0.001)])


def test_local_stabilization_passes_on_decay():
    """A decaying run stays in its level set and is in B_r after the deadline."""
    invariance, entry = local_stabilization_check(DECAYING, 0.2, 2.0, 3.0)
    assert invariance.passed
    assert entry.passed
    assert entry.trials == 2


def test_entry_after_horizon_is_insufficient():
    """A deadline past the last record leaves nothing to check."""
    assert entry_check('ball_entry', DECAYING, 0.2, 10.0).status == INSUFFICIENT


def test_entry_fails_outside_ball():
    """A record outside B_r after the deadline fails."""
    result = entry_check('ball_entry', DECAYING, 0.2, 2.0)
    assert result.status == FAIL
    assert result.worst_margin == pytest.approx(-0.3)


def test_knot_decrease():
    """Strict decrease passes, a flat step outside Rcal(r) fails."""
    assert knot_decrease_check(DECAYING, 0.14).passed
    flat = _log([(0.0, 2.0, 1.0), (1.0, 1.9, 1.0)])
    assert knot_decrease_check(flat, 0.14).status == FAIL


def test_knot_decrease_ignores_substeps():
    """Only knot records take part."""
    log = _log([(0.0, 2.0, 1.0), (0.5, 1.8, 1.2), (1.0, 1.5, 0.8)], knots=[0.0, 1.0])
    assert knot_decrease_check(log, 0.1).passed


def test_first_entry():
    """The first knot under I(r)/2 comes in time and the run stays in O_r afterwards."""
    entry_time, stays = first_entry_checks(DECAYING, 0.2, 0.005, 3.5)
    assert entry_time.passed
    assert entry_time.detail['entry'] == 3.0
    assert stays.passed
    late, _ = first_entry_checks(DECAYING, 0.2, 0.005, 2.5)
    assert not late.passed
    never, nothing = first_entry_checks(DECAYING, 0.2, 1e-9, 3.5)
    assert never.status == FAIL
    assert nothing.status == INSUFFICIENT


def test_lemma_margins_skip_nan():
    """NaN margins are ignored, negative ones beyond the slack fail."""
    results = {result.name: result for result in bound_margin_checks(_log([(0.0, 1.0, 0.5)], lemma52=0.1))}
    assert results['extremal_shift_decrease'].status == PASS
    assert results['held_interval_decrease'].status == INSUFFICIENT
    failing = bound_margin_checks(_log([(0.0, 1.0, 0.5)], prop26=-1e-3))
    assert failing[2].status == FAIL


def test_time_to_ball():
    """The earliest time after which the run never leaves B_r."""
    assert time_to_ball(DECAYING, 0.2) == 3.0
    assert time_to_ball(DECAYING, 0.01) is None
    bouncing = _log([(0.0, 0.1, 0.0), (1.0, 0.5, 0.0), (2.0, 0.1, 0.0)])
    assert time_to_ball(bouncing, 0.2) == 2.0


def test_empty_log_is_an_error():
    """Verdicts need at least one record."""
    with pytest.raises(StabError):
        time_to_ball(TrajectoryLog(particles=1, dim=2, knot_times=[0.0]), 0.2)
