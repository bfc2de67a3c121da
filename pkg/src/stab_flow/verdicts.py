"""
Verdicts read back from a TrajectoryLog. Everything here works on the records alone, so a
persisted CSV can be re-checked without simulating again.
"""

import math

import numpy as np

from stab_flow.checks import FAIL, PropertyResult
from stab_flow.errors import StabError
from stab_flow.shells import ShellTable, shell_descent_checks
from stab_flow.stabilize import TrajectoryLog

# margins of per-step bounds are compared with this slack
BOUND_TOLERANCE = 1e-6


def _require_records(log: TrajectoryLog) -> None:
    if not log.records:
        raise StabError('the trajectory log holds no records')


def entry_check(name: str, log: TrajectoryLog, r: float, deadline: float, **detail) -> PropertyResult:
    """W2(m_t, target) <= r for every record with t >= deadline; no such record is insufficient-data"""
    _require_records(log)
    margins = [r - rec.w2_to_target for rec in log.records if rec.t >= deadline]
    return PropertyResult.from_margins(name, margins, tolerance=0.0, deadline=deadline, **detail)


def local_stabilization_check(
    log: TrajectoryLog, r: float, level: float, deadline: float, level_tolerance: float = 1e-9
) -> list[PropertyResult]:
    """
    Stays in the kappa-level set of I(R)/2, and inside B_r from the deadline on. A run that
    starts above that level is held to the sublevel set of its starting phi_kappa instead.
    """
    _require_records(log)
    phi_kappa = log.column('phi_kappa')
    start = phi_kappa[0] if math.isfinite(phi_kappa[0]) else level
    bound = max(level, start)
    invariance = [bound - value for value in phi_kappa if math.isfinite(value)]
    return [
        PropertyResult.from_margins(
            'level_set_invariance', invariance, tolerance=level_tolerance, level=level, bound=bound
        ),
        entry_check('ball_entry', log, r, deadline),
    ]


def bound_margin_checks(log: TrajectoryLog, tolerance: float = BOUND_TOLERANCE) -> list[PropertyResult]:
    """The per-step margins the runner recorded; NaN marks a record where a bound does not apply"""
    _require_records(log)
    results = []
    for column, name in (
        ('lemma52_margin', 'extremal_shift_decrease'),
        ('lemma53_margin', 'held_interval_decrease'),
        ('prop26_margin', 'step_speed_bound'),
    ):
        values = log.column(column)
        results.append(PropertyResult.from_margins(name, values[np.isfinite(values)], tolerance=tolerance))
    return results


def knot_decrease_check(log: TrajectoryLog, rcal_r: float) -> PropertyResult:
    """phi_kappa strictly drops from knot to knot while the knot lies outside B_{Rcal(r)}"""
    knots = log.knots()
    margins = []
    for before, after in zip(knots, knots[1:], strict=False):
        if before.shell_index != after.shell_index or before.w2_to_target <= rcal_r:
            continue
        if math.isfinite(before.phi_kappa) and math.isfinite(after.phi_kappa):
            margins.append(before.phi_kappa - after.phi_kappa)
    result = PropertyResult.from_margins('knot_decrease', margins, tolerance=0.0, rcal_r=rcal_r)
    if result.trials and min(margins) <= 0:
        result.status = FAIL
    return result


def first_entry_checks(log: TrajectoryLog, r: float, level_r: float, time_bound: float) -> list[PropertyResult]:
    """
    The first knot inside the kappa-level set of I(r)/2 comes before time_bound, and every
    record from then on stays in the open ball O_r.
    """
    _require_records(log)
    knots = log.knots()
    entry = next((k.t for k in knots if math.isfinite(k.phi_kappa) and k.phi_kappa <= level_r), None)
    if entry is None:
        return [
            PropertyResult.from_margins('first_entry_time', [-math.inf], time_bound=time_bound),
            PropertyResult.from_margins('stays_after_entry', [], entry=None),
        ]
    after = [r - rec.w2_to_target for rec in log.records if rec.t >= entry]
    stay = PropertyResult.from_margins('stays_after_entry', after, entry=entry)
    if stay.trials and min(after) <= 0:
        stay.status = FAIL
    return [
        PropertyResult.from_margins('first_entry_time', [time_bound - entry], entry=entry, time_bound=time_bound),
        stay,
    ]


def s_stabilization_check(
    log: TrajectoryLog,
    r: float,
    R: float,  # noqa: N803
    shells: ShellTable,
    deadline: float | None = None,
    sweep: tuple[float, ...] = (4.0, 2.0, 1.0, 0.5),
) -> list[PropertyResult]:
    """
    (1) inside B_r from T(r, R) on (or from the scenario deadline, when given),
    (2) never outside B_{M(R)}, (3) M(R) nonincreasing over a shrinking sweep of R.
    """
    _require_records(log)
    if log.records[0].w2_to_target > R:
        raise StabError(f'the run starts at W2={log.records[0].w2_to_target:.6g}, outside B_R with R={R}')
    theory = shells.time_bound(r, R)
    bound = shells.m_of(R)
    radii = sorted(sweep, reverse=True)
    ms = [shells.m_of(radius) for radius in radii]
    shrinking = [a - b for a, b in zip(ms, ms[1:], strict=False)]
    vanishing = PropertyResult.from_margins('bound_vanishes', shrinking, radii=radii, bounds=ms)
    if ms and ms[-1] >= ms[0] and len(ms) > 1:
        vanishing.status = FAIL
    return [
        entry_check(
            'uniform_entry', log, r, deadline if deadline is not None else theory, theoretical_time=theory
        ),
        PropertyResult.from_margins('uniform_bound', [bound - rec.w2_to_target for rec in log.records], M=bound),
        vanishing,
    ]


def global_descent_checks(log: TrajectoryLog, shells: ShellTable, r: float) -> list[PropertyResult]:
    knots = [(rec.t, rec.shell_index, rec.w2_to_target) for rec in log.knots()]
    return shell_descent_checks(knots, shells, r, log.horizon)


def time_to_ball(log: TrajectoryLog, r: float) -> float | None:
    """Earliest recorded time from which every later record lies in B_r; None if the run never settles"""
    _require_records(log)
    settled = None
    for record in reversed(log.records):
        if record.w2_to_target > r:
            break
        settled = record.t
    return settled
