"""
Re-check a simulate report from its persisted artifacts: the report JSON and the trajectory
CSV next to it. Nothing is simulated again.
"""

import sys
from argparse import ArgumentParser

from cpg_utils import to_path
from loguru import logger

from stab_flow.checks import FAIL, PropertyResult
from stab_flow.errors import StabError
from stab_flow.shells import ShellTable
from stab_flow.stabilize import TrajectoryLog
from stab_flow.utils import configure_logging, read_json
from stab_flow.verdicts import (
    bound_margin_checks,
    first_entry_checks,
    global_descent_checks,
    knot_decrease_check,
    local_stabilization_check,
    s_stabilization_check,
)


def recheck(report: dict, trajectory: str) -> list[PropertyResult]:
    """Every trajectory-level check of a simulate report, recomputed from the CSV"""
    scenario, summary = report['scenario'], report['summary']
    if report.get('knot_times') is None:
        raise StabError('the report has no partition, so it did not run a trajectory')
    log = TrajectoryLog.from_csv(
        trajectory,
        knot_times=report['knot_times'],
        particles=scenario['particles'],
        dim=scenario['dimension'],
        seed=report['seed'],
        scenario_hash=report['scenario_hash'],
    )
    r, tolerances = scenario['r'], scenario['tolerances']
    if scenario['mode'] == 'global':
        shells = ShellTable.from_dict(report['shells'])
        sweep = tuple(scenario['shells']['R_sweep'])
        results = s_stabilization_check(log, r, scenario['R'], shells, scenario['feedback']['deadline'], sweep)
        results += global_descent_checks(log, shells, r)
    else:
        results = local_stabilization_check(log, r, summary['level'], summary['deadline'], tolerances['level'])
        results.append(knot_decrease_check(log, summary['Rcal_r']))
        results += first_entry_checks(log, r, summary['level_r'], summary['first_entry_bound'])
    return results + bound_margin_checks(log, tolerances['bound'])


def disagreements(report: dict, results: list[PropertyResult]) -> list[str]:
    """Names of checks whose recomputed status differs from the stored one"""
    stored = {check['name']: check['status'] for check in (*report['properties'], *report['verdicts'])}
    return [result.name for result in results if stored.get(result.name) != result.status]


def main(report_path: str, trajectory: str | None = None) -> int:
    report = read_json(report_path)
    trajectory = trajectory or str(to_path(report_path).parent / 'trajectory.csv')
    results = recheck(report, trajectory)
    mismatched = disagreements(report, results)
    for name in mismatched:
        logger.error(f'{name}: stored status does not match the recomputed one')
    failed = [result.name for result in results if result.status == FAIL]
    logger.info(f'rechecked {len(results)} checks: {len(mismatched)} disagree, {len(failed)} fail')
    if mismatched:
        return 1
    return 2 if failed else 0


if __name__ == '__main__':
    configure_logging()
    parser = ArgumentParser(description='Re-check a simulate report without re-running it')
    parser.add_argument('--report', help='report.json written by `stab simulate`', required=True)
    parser.add_argument('--trajectory', help='trajectory CSV (defaults to the one beside the report)', default=None)
    args = parser.parse_args()
    sys.exit(main(report_path=args.report, trajectory=args.trajectory))
