"""
Sweep workers: one cmd_simulate per axis value, fanned out over a process pool. Workers share
nothing and each writes under its own directory.
"""

import csv
import math
import multiprocessing as mp
from collections.abc import Callable, Iterable
from dataclasses import dataclass

import numpy as np
from cpg_utils import to_path
from loguru import logger

from stab_flow.errors import StabError
from stab_flow.scenario import Scenario, with_axis

SWEEP_COLUMNS = (
    'axis',
    'value',
    'status',
    'exit_code',
    'time_to_ball',
    'final_w2',
    'extremal_shift_decrease',
    'held_interval_decrease',
    'step_speed_bound',
    'report',
    'error',
)
MARGIN_COLUMNS = ('extremal_shift_decrease', 'held_interval_decrease', 'step_speed_bound')


@dataclass(frozen=True)
class SweepTask:
    axis: str
    value: float
    scenario: Scenario
    out_dir: str


def job_directory(out_dir: str, axis: str, value: float) -> str:
    return str(to_path(out_dir) / 'jobs' / f'{axis}_{value:g}')


def simulate_job(task: SweepTask) -> dict:
    """Run one sweep point; a failure becomes a row, never an exception"""
    from stab_flow.stages import cmd_simulate  # noqa: PLC0415

    row = dict.fromkeys(SWEEP_COLUMNS, '')
    row |= {'axis': task.axis, 'value': task.value}
    try:
        scenario = with_axis(task.scenario, task.axis, task.value)
        report = cmd_simulate(scenario, task.out_dir)
    except StabError as err:
        logger.error(f'sweep point {task.axis}={task.value} failed before simulating: {err}')
        return row | {'status': 'error', 'exit_code': err.exit_code, 'error': str(err)}

    margins = {result.name: result.worst_margin for result in report.properties}
    row |= {
        'status': report.status,
        'exit_code': report.exit_code,
        'time_to_ball': report.summary.get('time_to_ball'),
        'final_w2': report.summary.get('final_w2'),
        'report': f'jobs/{to_path(task.out_dir).name}/report.json',
        'error': report.error or '',
    }
    for column in MARGIN_COLUMNS:
        row[column] = margins.get(column)
    return row


def run_pool(worker: Callable[[SweepTask], dict], tasks: list[SweepTask], jobs: int = 1) -> list[dict]:
    """Rows in task order; jobs = 1 runs in this process"""
    if not tasks:
        return []
    if jobs <= 1:
        return [worker(task) for task in tasks]
    with mp.Pool(processes=min(jobs, len(tasks))) as pool:
        return list(pool.imap(worker, tasks))


def write_sweep_csv(rows: Iterable[dict], path: str) -> None:
    with to_path(path).open('w') as handle:
        writer = csv.DictWriter(handle, fieldnames=SWEEP_COLUMNS, lineterminator='\n')
        writer.writeheader()
        for row in rows:
            writer.writerow({key: '' if row.get(key) is None else row.get(key) for key in SWEEP_COLUMNS})


def _stats(values: list[float]) -> dict:
    if not values:
        return {'count': 0}
    array = np.array(values, dtype=float)
    return {
        'count': len(values),
        'mean': float(array.mean()),
        'std': float(array.std()),
        'min': float(array.min()),
        'max': float(array.max()),
    }


def summarise(rows: list[dict]) -> dict:
    """Time-to-ball and worst-margin statistics over the rows that produced a number"""

    def numbers(column: str) -> list[float]:
        return [
            float(row[column])
            for row in rows
            if isinstance(row.get(column), int | float) and math.isfinite(float(row[column]))
        ]

    times = numbers('time_to_ball')
    summary = {
        'jobs': len(rows),
        'failed': sum(1 for row in rows if row.get('exit_code') != 0),
        'time_to_ball': _stats(times),
    }
    if len(times) > 1 and summary['time_to_ball']['mean'] > 0:
        stats = summary['time_to_ball']
        summary['time_to_ball']['relative_spread'] = (stats['max'] - stats['min']) / stats['mean']
    for column in MARGIN_COLUMNS:
        summary[column] = _stats(numbers(column))
    return summary
