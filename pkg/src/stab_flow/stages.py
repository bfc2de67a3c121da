"""
The commands behind `stab`: simulate, verify, shells and sweep. Each one writes its artifacts
under an output directory and returns a RunReport; the report's status decides the exit code.
"""

import time
from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

import numpy as np
from cpg_utils import to_path
from loguru import logger

from stab_flow.checks import FAIL, INSUFFICIENT, PropertyResult
from stab_flow.errors import ConfigurationError, StabError, TrajectoryAbortedError
from stab_flow.jobs.suites import SUITES, lemmas_suite, proximal_suite, transport_suite
from stab_flow.jobs.sweep import SweepTask, job_directory, run_pool, simulate_job, summarise, write_sweep_csv
from stab_flow.proximal import InfConvOptions
from stab_flow.scenario import SWEEP_AXES, Scenario, ScenarioContext, build_context
from stab_flow.scripts import make_sweep_index
from stab_flow.shells import ShellSettings, ShellTable, build_shells, global_feedback
from stab_flow.stabilize import (
    OperatingPoint,
    ParameterSelection,
    TrajectoryLog,
    TrajectoryOptions,
    constant_feedback,
    local_feedback,
    make_partition,
    operating_point,
    run_theta_trajectory,
    select_parameters,
)
from stab_flow.utils import seed_table, sub_seed, write_json
from stab_flow.verdicts import (
    bound_margin_checks,
    first_entry_checks,
    global_descent_checks,
    knot_decrease_check,
    local_stabilization_check,
    s_stabilization_check,
    time_to_ball,
)

PASSED = 'pass'
FAILED = 'fail'
ERRORED = 'error'

REPORT_NAME = 'report.json'
TRAJECTORY_NAME = 'trajectory.csv'


@dataclass
class RunReport:
    """What a command did, what it measured, and whether every check held"""

    command: str
    scenario: dict
    scenario_hash: str
    seed: int
    seeds: dict[str, int]
    status: str = PASSED
    error: str | None = None
    error_code: int = 0
    selection: dict | None = None
    operating: dict | None = None
    moduli: dict | None = None
    system: dict | None = None
    shells: dict | None = None
    knot_times: list[float] | None = None
    properties: list[PropertyResult] = field(default_factory=list)
    verdicts: list[PropertyResult] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    artifacts: dict[str, str] = field(default_factory=dict)

    @classmethod
    def start(cls, command: str, scenario: Scenario) -> 'RunReport':
        return cls(
            command=command,
            scenario=scenario.as_dict(),
            scenario_hash=scenario.hash,
            seed=scenario.seed,
            seeds=seed_table(scenario.seed),
        )

    def _names(self) -> set[str]:
        return {result.name for result in (*self.properties, *self.verdicts)}

    def add(self, results: list[PropertyResult] | PropertyResult, verdict: bool = False) -> None:
        """Each named check may appear once"""
        results = [results] if isinstance(results, PropertyResult) else results
        for result in results:
            if result.name in self._names():
                raise StabError(f'check {result.name} was reported twice')
            (self.verdicts if verdict else self.properties).append(result)
            logger.info(f'{result.name}: {result.status} over {result.trials} trials (worst {result.worst_margin})')

    @contextmanager
    def timed(self, name: str) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = time.perf_counter() - start

    def record_error(self, err: StabError) -> None:
        logger.error(f'{self.command} stopped: {err}')
        self.status = ERRORED
        self.error = str(err)
        self.error_code = err.exit_code

    def finish(self) -> 'RunReport':
        """A failed check fails the report; insufficient data is counted but does not"""
        if self.status != ERRORED:
            checks = [*self.properties, *self.verdicts]
            self.status = FAILED if any(result.status == FAIL for result in checks) else PASSED
            self.summary['insufficient'] = [result.name for result in checks if result.status == INSUFFICIENT]
        return self

    @property
    def exit_code(self) -> int:
        if self.status == ERRORED:
            return self.error_code
        return 2 if self.status == FAILED else 0

    def as_dict(self) -> dict:
        data = asdict(self)
        data['exit_code'] = self.exit_code
        return data

    def write(self, out_dir: str) -> str:
        path = str(to_path(out_dir) / REPORT_NAME)
        self.artifacts['report'] = path
        write_json(self.as_dict(), path)
        logger.info(f'wrote {self.command} report ({self.status}) to {path}')
        return path


def _prepare(out_dir: str) -> None:
    to_path(out_dir).mkdir(parents=True, exist_ok=True)


def _inf_conv_options(scenario: Scenario) -> InfConvOptions:
    return InfConvOptions(probes=scenario.feedback.probes, seed=sub_seed(scenario.seed, 'inf_conv'))


def _certify(ctx: ScenarioContext, report: RunReport) -> tuple[ParameterSelection, OperatingPoint]:
    """Certified tuple for (r, R), then the operating point the scenario asks for"""
    scenario = ctx.scenario
    with report.timed('select_parameters'):
        selection = select_parameters(
            ctx.clp, ctx.field, ctx.controls, scenario.r, scenario.R, ctx.system, scenario.selector, ctx.sampler
        )
    delta_max = scenario.partition.delta_max or selection.delta_max
    delta_min = scenario.partition.delta_min or min(delta_max, selection.delta_min)
    point = operating_point(ctx.clp, selection, scenario.feedback.kappa, scenario.feedback.eps, delta_min, delta_max)
    report.selection = selection.as_dict()
    report.operating = point.as_dict()
    report.moduli = {'R': selection.moduli_R.as_dict(), 'r': selection.moduli_r.as_dict()}
    return selection, point


def _trajectory_options(ctx: ScenarioContext) -> TrajectoryOptions:
    scenario = ctx.scenario
    return TrajectoryOptions(
        clp=ctx.clp,
        substeps=scenario.substeps,
        max_substep=scenario.max_substep,
        track_phi_kappa=scenario.feedback.track_phi_kappa,
        inf_conv=_inf_conv_options(scenario),
        seed=scenario.seed,
        scenario_hash=scenario.hash,
    )


def _note_certification(report: RunReport, certified: bool, deadline_override: bool, **detail) -> None:
    """State at the top of the summary which verdicts rest on an operating point outside the certified region"""
    uncertified = [] if certified else [result.name for result in report.verdicts]
    report.summary |= {
        'operating_certified': certified,
        'uncertified_verdicts': uncertified,
        'deadline_source': 'scenario' if deadline_override else 'theory',
        **detail,
    }
    if uncertified:
        logger.warning(f'verdicts {", ".join(uncertified)} come from an uncertified operating point')


def _simulate_local(ctx: ScenarioContext, report: RunReport) -> TrajectoryLog:
    scenario, fb, tol = ctx.scenario, ctx.scenario.feedback, ctx.scenario.tolerances
    selection, point = _certify(ctx, report)
    partition_seed = sub_seed(scenario.seed, 'partition')
    partition = make_partition(
        point.delta_min, point.delta_max, scenario.horizon, scenario.partition.rule, partition_seed
    )
    report.knot_times = list(partition.times)
    if fb.policy == 'constant':
        policy = constant_feedback(ctx.controls, fb.constant_control, point.diagnostics)
    else:
        policy = local_feedback(
            ctx.clp, ctx.field, ctx.controls, point.kappa, point.eps, _inf_conv_options(scenario), point.diagnostics
        )

    with report.timed('trajectory'):
        log = run_theta_trajectory(ctx.initial, partition, policy, ctx.field, _trajectory_options(ctx))

    theory = point.T_bound + point.delta_max
    deadline = fb.deadline if fb.deadline is not None else theory
    level_r = 0.5 * selection.moduli_r.I
    report.summary |= {
        'deadline': deadline,
        'theoretical_time': theory,
        'certified_time': selection.T_certified,
        'level': point.diagnostics.level,
        'level_r': level_r,
        'Rcal_r': point.diagnostics.Rcal_r,
        'first_entry_bound': point.T_bound,
    }
    report.add(local_stabilization_check(log, scenario.r, point.diagnostics.level, deadline, tol.level), verdict=True)
    report.add(bound_margin_checks(log, tol.bound))
    report.add(knot_decrease_check(log, point.diagnostics.Rcal_r))
    report.add(first_entry_checks(log, scenario.r, level_r, point.T_bound))
    _note_certification(report, point.certified, fb.deadline is not None)
    return log


def _shell_table(ctx: ScenarioContext, report: RunReport) -> ShellTable:
    scenario = ctx.scenario
    settings = ShellSettings(
        kappa=scenario.feedback.kappa,
        eps_rel=scenario.shells.eps_rel,
        delta_max=scenario.partition.delta_max,
        delta_min=scenario.partition.delta_min,
        dwell=scenario.shells.dwell,
        selector=scenario.selector,
    )
    with report.timed('build_shells'):
        shells = build_shells(
            ctx.clp,
            ctx.field,
            ctx.controls,
            ctx.system,
            scenario.shells.q0,
            scenario.shells.i_min,
            scenario.shells.i_max,
            settings,
            ctx.sampler,
        )
    report.shells = shells.as_dict()
    report.add(shells.invariant_checks())
    return shells


def _simulate_global(ctx: ScenarioContext, report: RunReport) -> TrajectoryLog:
    scenario, fb, tol = ctx.scenario, ctx.scenario.feedback, ctx.scenario.tolerances
    shells = _shell_table(ctx, report)
    delta_max = scenario.partition.delta_max or shells.sampling_step(scenario.r, scenario.R)
    delta_min = scenario.partition.delta_min or min(delta_max, 0.5 * delta_max)
    partition = make_partition(
        delta_min, delta_max, scenario.horizon, scenario.partition.rule, sub_seed(scenario.seed, 'partition')
    )
    report.knot_times = list(partition.times)
    if fb.policy == 'constant':
        policy = constant_feedback(ctx.controls, fb.constant_control)
    else:
        policy = global_feedback(
            shells,
            ctx.clp,
            ctx.field,
            ctx.controls,
            fb.fallback_control,
            _inf_conv_options(scenario),
            tol.level,
            tol.atom,
        )

    with report.timed('trajectory'):
        log = run_theta_trajectory(ctx.initial, partition, policy, ctx.field, _trajectory_options(ctx))

    theory = shells.time_bound(scenario.r, scenario.R)
    report.summary |= {
        'deadline': fb.deadline if fb.deadline is not None else theory,
        'theoretical_time': theory,
        'N_R': shells.n_of(scenario.R),
        'K_r': shells.k_of(scenario.r),
        'M_R': shells.m_of(scenario.R),
        'delta_rR': shells.sampling_step(scenario.r, scenario.R),
    }
    report.add(
        s_stabilization_check(log, scenario.r, scenario.R, shells, fb.deadline, scenario.shells.R_sweep), verdict=True
    )
    report.add(global_descent_checks(log, shells, scenario.r), verdict=True)
    report.add(bound_margin_checks(log, tol.bound))
    uncertified_shells = [row.index for row in shells.rows if not row.certified]
    _note_certification(
        report, not uncertified_shells, fb.deadline is not None, uncertified_shells=uncertified_shells
    )
    return log


def _write_trajectory(log: TrajectoryLog | None, report: RunReport, out_dir: str, stride: int) -> None:
    if log is None or not log.records:
        return
    path = str(to_path(out_dir) / TRAJECTORY_NAME)
    log.to_csv(path)
    report.artifacts['trajectory'] = path
    snapshots = log.write_snapshots(str(to_path(out_dir) / 'snapshots'), stride)
    if snapshots:
        report.artifacts['snapshots'] = str(to_path(out_dir) / 'snapshots')
    report.summary |= {
        'records': len(log.records),
        'final_w2': log.records[-1].w2_to_target,
        'time_to_ball': time_to_ball(log, report.scenario['r']),
    }


def cmd_simulate(scenario: Scenario, out_dir: str) -> RunReport:
    """
    Local mode: certified and operating parameters, a partition, the extremal-shift (or
    constant) feedback and the trajectory, then the local stabilization verdicts.
    Global mode: the shell table and the global feedback, then the s-stabilization verdicts.
    Partial artifacts are written when a step fails.
    """
    _prepare(out_dir)
    report = RunReport.start('simulate', scenario)
    log = None
    try:
        with report.timed('context'):
            ctx = build_context(scenario)
        report.system = asdict(ctx.system)
        log = _simulate_global(ctx, report) if scenario.mode == 'global' else _simulate_local(ctx, report)
    except TrajectoryAbortedError as err:
        log = err.partial_log
        report.record_error(err)
    except StabError as err:
        report.record_error(err)
    _write_trajectory(log, report, out_dir, scenario.snapshot_stride)
    report.finish().write(out_dir)
    return report


def cmd_verify(scenario: Scenario, suite: str, out_dir: str) -> RunReport:
    """Randomised property suites seeded from the scenario; failures are reported, the report always written"""
    if suite != 'all' and suite not in SUITES:
        raise ConfigurationError(f'unknown suite {suite!r}, supported: all, {", ".join(SUITES)}')
    _prepare(out_dir)
    report = RunReport.start(f'verify:{suite}', scenario)
    rng = np.random.default_rng(sub_seed(scenario.seed, 'verify'))
    try:
        with report.timed('context'):
            ctx = build_context(scenario)
        report.system = asdict(ctx.system)
        certified = None
        for name in SUITES if suite == 'all' else (suite,):
            with report.timed(name):
                if name == 'transport':
                    report.add(transport_suite(ctx, rng))
                    continue
                certified = certified or _certify(ctx, report)
                selection, point = certified
                if name == 'proximal':
                    report.add(proximal_suite(ctx, point, rng))
                else:
                    report.add(lemmas_suite(ctx, selection, point, rng))
    except StabError as err:
        report.record_error(err)
    report.finish().write(out_dir)
    return report


def cmd_shells(scenario: Scenario, out_dir: str) -> RunReport:
    """Shell table as CSV and JSON, with its construction invariants"""
    _prepare(out_dir)
    report = RunReport.start('shells', scenario)
    try:
        ctx = build_context(scenario)
        report.system = asdict(ctx.system)
        shells = _shell_table(ctx, report)
        csv_path, json_path = str(to_path(out_dir) / 'shells.csv'), str(to_path(out_dir) / 'shells.json')
        shells.to_csv(csv_path)
        shells.to_json(json_path)
        report.artifacts |= {'shells_csv': csv_path, 'shells_json': json_path}
    except StabError as err:
        report.record_error(err)
    report.finish().write(out_dir)
    return report


def cmd_sweep(scenario: Scenario, axis: str, values: list[float], out_dir: str, jobs: int = 1) -> RunReport:
    """One simulation per value, each under jobs/<axis>_<value>/, aggregated into sweep.csv"""
    if axis not in SWEEP_AXES:
        raise ConfigurationError(f'unknown sweep axis {axis!r}, supported: {", ".join(SWEEP_AXES)}')
    _prepare(out_dir)
    report = RunReport.start(f'sweep:{axis}', scenario)
    tasks = [SweepTask(axis, value, scenario, job_directory(out_dir, axis, value)) for value in values]
    if not tasks:
        logger.info('empty sweep, nothing to run')
    with report.timed('sweep'):
        rows = run_pool(simulate_job, tasks, jobs)

    csv_path = str(to_path(out_dir) / 'sweep.csv')
    write_sweep_csv(rows, csv_path)
    index_path = str(to_path(out_dir) / 'index.html')
    make_sweep_index.main(sweep=csv_path, output=index_path, title=f'{scenario.name}: {axis} sweep')
    report.artifacts |= {'sweep': csv_path, 'index': index_path}
    report.summary |= summarise(rows)
    report.summary['rows'] = rows
    report.add(PropertyResult.from_flags('sweep_jobs', [row['exit_code'] == 0 for row in rows], axis=axis))
    report.finish().write(out_dir)
    return report
