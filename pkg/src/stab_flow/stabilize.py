"""
Sample-and-hold feedback: partitions, the extremal-shift control, parameter selection and
the theta-trajectory runner with its per-step diagnostics.
"""

import csv
import math
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
from cpg_utils import to_path
from loguru import logger

from stab_flow.dynamics import ControlSet, VectorField, c2_constant, c3_constant, default_substeps, flow_segment
from stab_flow.errors import (
    ConfigurationError,
    InfeasibleParametersError,
    StabError,
    TrajectoryAbortedError,
)
from stab_flow.lyapunov import (
    ControlLyapunovPair,
    DerivedConstants,
    ModuliTable,
    delta_annulus,
    derived_constants,
    moduli_table,
)
from stab_flow.measures import EmpiricalMeasure, TransportPlan, w2_distance, write_measure_csv
from stab_flow.proximal import InfConvOptions, InfConvResult, inf_convolution
from stab_flow.sampling import MeasureSampler

TIE_TOLERANCE = 1e-12
LEVEL_TOLERANCE = 1e-9


@dataclass(frozen=True)
class Partition:
    times: tuple[float, ...]
    delta_min: float
    delta_max: float

    def __post_init__(self) -> None:
        if not self.times or self.times[0] != 0:
            raise ConfigurationError('a partition starts at t = 0')
        steps = np.diff(self.times)
        if np.any(steps <= 0):
            raise ConfigurationError('partition times must be strictly increasing')
        slack = 1e-12 * max(1.0, self.delta_max)
        if np.any(steps < self.delta_min - slack) or np.any(steps > self.delta_max + slack):
            raise ConfigurationError(f'partition steps leave [{self.delta_min}, {self.delta_max}]')

    @property
    def horizon(self) -> float:
        return self.times[-1]

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.times)


def make_partition(
    delta_min: float,
    delta_max: float,
    horizon: float,
    rule: str = 'uniform',
    seed: int | None = None,
) -> Partition:
    """
    Knots covering [0, horizon] with every step in [delta_min, delta_max]. 'uniform' uses the
    fewest equal steps that fit, 'jittered' draws each step uniformly from the bounds.
    """
    if not 0 < delta_min <= delta_max:
        raise ConfigurationError(f'need 0 < delta_min <= delta_max, got {delta_min}, {delta_max}')
    if horizon <= 0:
        raise ConfigurationError(f'horizon must be positive, got {horizon}')
    if delta_min > horizon:
        raise ConfigurationError(f'delta_min={delta_min} exceeds the horizon {horizon}')

    if rule == 'uniform':
        count = max(1, math.ceil(horizon / delta_max - 1e-9))
        step = horizon / count
        if step < delta_min:
            step = delta_min
            count = math.ceil(horizon / step - 1e-9)
        times = [k * step for k in range(count + 1)]
        if abs(times[-1] - horizon) <= 1e-12 * horizon:
            times[-1] = horizon
    elif rule == 'jittered':
        rng = np.random.default_rng(seed)
        times = [0.0]
        while times[-1] < horizon - 1e-12:
            times.append(times[-1] + rng.uniform(delta_min, delta_max))
    else:
        raise ConfigurationError(f'unknown partition rule {rule!r}, supported: jittered, uniform')
    return Partition(times=tuple(times), delta_min=delta_min, delta_max=delta_max)


@dataclass(frozen=True)
class StepDiagnostics:
    """Constants a feedback's per-step bounds are checked against"""

    kappa: float
    eps: float
    Delta: float
    N_ke: float
    C2: float
    R: float
    Rcal_r: float
    level: float
    shell: int | None = None


@dataclass(frozen=True)
class FeedbackDecision:
    control_index: int
    control: np.ndarray
    objective: float | None
    phi_kappa: float | None
    shell: int | None
    diagnostics: StepDiagnostics | None
    inf_conv: InfConvResult | None = None


@dataclass
class FeedbackPolicy:
    kind: str
    controls: ControlSet
    decide: Callable[[EmpiricalMeasure], FeedbackDecision]
    diagnostics: StepDiagnostics | None = None

    def control_of(self, m: EmpiricalMeasure) -> np.ndarray:
        return self.decide(m).control


def shift_objectives(
    m: EmpiricalMeasure,
    minimizer: EmpiricalMeasure,
    plan: TransportPlan,
    f: VectorField,
    controls: ControlSet,
    kappa: float,
) -> np.ndarray:
    """For each u: integral of ((x - y) / kappa^2) . f(x, m, u) against the plan"""
    x = m.points[plan.sources]
    covectors = (x - minimizer.points[plan.targets]) / kappa**2
    weighted = covectors * plan.masses[:, None]
    return np.array([float(np.sum(weighted * f.fn(x, m.points, u))) for u in controls.controls])


def extremal_shift_choice(
    m: EmpiricalMeasure,
    minimizer: EmpiricalMeasure,
    plan: TransportPlan,
    f: VectorField,
    controls: ControlSet,
    kappa: float,
) -> tuple[int, np.ndarray]:
    """(index of the minimising control, all objectives); near-ties go to the earliest control"""
    if len(controls) == 0:
        raise ConfigurationError('extremal shift needs a nonempty control set')
    objectives = shift_objectives(m, minimizer, plan, f, controls, kappa)
    best = float(objectives.min())
    index = int(np.flatnonzero(objectives <= best + TIE_TOLERANCE * max(1.0, abs(best)))[0])
    return index, objectives


def extremal_shift_control(
    m: EmpiricalMeasure,
    plan: TransportPlan,
    f: VectorField,
    controls: ControlSet,
    kappa: float,
    *,
    minimizer: EmpiricalMeasure,
) -> np.ndarray:
    """
    The extremal-shift control for m against the plan pairing x_i with y_i. A TransportPlan
    holds indices only, so the y_i come from `minimizer`, the measure the plan points into.
    """
    index, _ = extremal_shift_choice(m, minimizer, plan, f, controls, kappa)
    return controls[index]


def local_feedback(
    clp: ControlLyapunovPair,
    f: VectorField,
    controls: ControlSet,
    kappa: float,
    eps: float,
    opts: InfConvOptions | None = None,
    diagnostics: StepDiagnostics | None = None,
    shell: int | None = None,
) -> FeedbackPolicy:
    """k(m): inf-convolve m, then take the extremal-shift control against the resulting plan"""

    def decide(m: EmpiricalMeasure) -> FeedbackDecision:
        result = inf_convolution(clp, kappa, eps, m, opts)
        index, objectives = extremal_shift_choice(m, result.minimizer, result.plan, f, controls, kappa)
        return FeedbackDecision(
            control_index=index,
            control=controls[index],
            objective=float(objectives[index]),
            phi_kappa=result.value,
            shell=shell,
            diagnostics=diagnostics,
            inf_conv=result,
        )

    return FeedbackPolicy(kind='local', controls=controls, decide=decide, diagnostics=diagnostics)


def constant_feedback(
    controls: ControlSet, index: int, diagnostics: StepDiagnostics | None = None
) -> FeedbackPolicy:
    """Open loop: always the same control"""
    if not 0 <= index < len(controls):
        raise ConfigurationError(f'constant control index {index} is outside the control set')

    def decide(m: EmpiricalMeasure) -> FeedbackDecision:  # noqa: ARG001
        return FeedbackDecision(index, controls[index], None, None, None, diagnostics)

    return FeedbackPolicy(kind='constant', controls=controls, decide=decide, diagnostics=diagnostics)


@dataclass(frozen=True)
class SystemConstants:
    c0: float
    c1: float
    sigma2_target: float


@dataclass(frozen=True)
class SelectorConfig:
    kappa_ratio: float = 0.7
    kappa_steps: int = 60
    eps_ratio: float = 0.5
    eps_steps: int = 60
    margin: float = 0.05
    headroom: float = 0.5
    delta_min_ratio: float = 0.5
    eps1_halvings: int = 200


@dataclass(frozen=True)
class ParameterSelection:
    kappa: float
    eps: float
    delta_min: float
    delta_max: float
    T_bound: float
    T_certified: float
    margins: dict[str, float]
    constants: DerivedConstants
    moduli_R: ModuliTable
    moduli_r: ModuliTable
    system: SystemConstants
    certified: bool = True

    def as_dict(self) -> dict:
        return {
            'kappa': self.kappa,
            'eps': self.eps,
            'delta_min': self.delta_min,
            'delta_max': self.delta_max,
            'T_bound': self.T_bound,
            'T_certified': self.T_certified,
            'margins': self.margins,
            'certified': self.certified,
        }


def _relative_margin(lhs: float, rhs: float) -> float:
    """(rhs - lhs) / rhs for a required lhs < rhs"""
    if rhs <= 0:
        return -math.inf
    return (rhs - lhs) / rhs


def inequality_margins(
    clp: ControlLyapunovPair,
    moduli_R: ModuliTable,  # noqa: N803
    moduli_r: ModuliTable,
    constants: DerivedConstants,
    c0: float,
) -> dict[str, float]:
    """Relative margins of the five strict inequalities the local feedback relies on"""
    level_lhs = constants.omega_at_M + constants.N_ke
    return {
        'level_fits_ball': _relative_margin(level_lhs, 0.5 * moduli_R.I),
        'shift_radius': _relative_margin(constants.M_ke, 0.5 * moduli_r.Rcal),
        'shift_drift': _relative_margin(2 * c0 / constants.kappa**2 * constants.K_ke**2, constants.Delta),
        'inner_level': _relative_margin(level_lhs, 0.25 * moduli_r.I),
        'clp_threshold': _relative_margin(constants.eps, clp.eps0),
    }


def delta_bounds(
    moduli_R: ModuliTable,  # noqa: N803
    moduli_r: ModuliTable,
    constants: DerivedConstants,
    system: SystemConstants,
    headroom: float = 0.5,
) -> tuple[float, float]:
    """
    Step bounds from the one-step decrease condition and from omega(C2 delta) < I(r) / 4, each
    with the given headroom. C2 and C3 are evaluated at a trial step of 1, which over-estimates
    them for every smaller step.
    """
    radius = constants.R
    shift = system.sigma2_target + radius
    poly = 1 + 4 * shift + 4 * shift**2
    c3 = c3_constant(radius, 1.0, system.c0, system.c1, system.sigma2_target)
    decrease = headroom * constants.Delta / (constants.M_ke * c3 + system.c1**2 / (2 * constants.kappa**2) * poly)

    target = headroom * 0.25 * moduli_r.I
    if moduli_R.closed_form:
        big = moduli_R.R + math.sqrt(2 * moduli_R.S + constants.eps**2)
        scale = -big + math.sqrt(big**2 + 2 * target)
    else:
        lo, hi = 0.0, 1.0
        while moduli_R.omega(hi, constants.eps) < target and hi < 1e6:
            lo, hi = hi, 2 * hi
        for _ in range(50):
            mid = 0.5 * (lo + hi)
            if moduli_R.omega(mid, constants.eps) < target:
                lo = mid
            else:
                hi = mid
        scale = lo
    c2 = c2_constant(radius, 1.0, system.c1, system.sigma2_target)
    continuity = scale / c2 if c2 > 0 else math.inf
    return min(decrease, 1.0), min(continuity, 1.0)


def entry_time_bound(i_value: float, constants: DerivedConstants, delta_min: float) -> float:
    """(I(R) + 2 n N) / (2 Delta) with n the knot count the first-entry argument needs"""
    steps = math.ceil(i_value / (2 * constants.Delta * delta_min)) + 1
    return (i_value + 2 * steps * constants.N_ke) / (2 * constants.Delta)


def select_parameters(
    clp: ControlLyapunovPair,
    f: VectorField,  # noqa: ARG001
    controls: ControlSet,  # noqa: ARG001
    r: float,
    R: float,  # noqa: N803
    system: SystemConstants,
    config: SelectorConfig | None = None,
    sampler: MeasureSampler | None = None,
) -> ParameterSelection:
    """
    Walk kappa = ratio^k and, for each kappa, eps = kappa^2 ratio^j until every inequality holds
    with the configured margin. Then fix the step bounds, shrink eps until N < Delta delta_min / 2
    and bound the entry time.
    """
    config = config or SelectorConfig()
    if not 0 < r < R:
        raise ConfigurationError(f'need 0 < r < R, got r={r}, R={R}')
    moduli_big = moduli_table(clp, R, 1.0, sampler)
    moduli_small = moduli_table(clp, r, 1.0, sampler)
    # the widest annulus (eps = 1) gives the smallest Delta
    delta_value = delta_annulus(clp, moduli_small.Rcal, R + math.sqrt(2 * moduli_big.S + 1.0), sampler)
    logger.warning('Delta(r, R) uses M^eps(R) as the outer radius of its annulus')

    last_failed = 'none'
    for k in range(config.kappa_steps):
        kappa = config.kappa_ratio**k
        for j in range(config.eps_steps):
            eps = kappa**2 * config.eps_ratio**j
            constants = derived_constants(clp, moduli_big, kappa, eps, r, R, delta=delta_value)
            margins = inequality_margins(clp, moduli_big, moduli_small, constants, system.c0)
            failing = [name for name, margin in margins.items() if margin < config.margin]
            if failing:
                last_failed = failing[0]
                continue
            return _finish_selection(clp, moduli_big, moduli_small, constants, system, config, delta_value)
    raise InfeasibleParametersError(
        f'no (kappa, eps) on the selector grids satisfies every inequality for r={r}, R={R}; '
        f'last failing: {last_failed}',
        last_failed,
    )


def _finish_selection(
    clp: ControlLyapunovPair,
    moduli_big: ModuliTable,
    moduli_small: ModuliTable,
    constants: DerivedConstants,
    system: SystemConstants,
    config: SelectorConfig,
    delta_value: float,
) -> ParameterSelection:
    decrease, continuity = delta_bounds(moduli_big, moduli_small, constants, system, config.headroom)
    delta_max = min(decrease, continuity)
    delta_min = config.delta_min_ratio * delta_max

    eps = constants.eps
    for _ in range(config.eps1_halvings):
        if constants.N_ke < 0.5 * constants.Delta * delta_min:
            break
        eps /= 2
        constants = derived_constants(
            clp, moduli_big, constants.kappa, eps, constants.r, constants.R, delta=delta_value
        )
    else:
        raise InfeasibleParametersError('eps could not be shrunk below the one-step decrease threshold', 'eps1')

    margins = inequality_margins(clp, moduli_big, moduli_small, constants, system.c0)
    t_bound = entry_time_bound(moduli_big.I, constants, delta_min)
    selection = ParameterSelection(
        kappa=constants.kappa,
        eps=eps,
        delta_min=delta_min,
        delta_max=delta_max,
        T_bound=t_bound,
        T_certified=t_bound + delta_max,
        margins=margins,
        constants=constants,
        moduli_R=moduli_big,
        moduli_r=moduli_small,
        system=system,
    )
    logger.info(
        f'certified tuple: kappa={selection.kappa:.6g}, eps={selection.eps:.6g}, '
        f'delta in [{delta_min:.6g}, {delta_max:.6g}], T={selection.T_certified:.6g}'
    )
    return selection


@dataclass(frozen=True)
class OperatingPoint:
    """The (kappa, eps, steps) a run actually uses, with its constants and whether it is certified"""

    kappa: float
    eps: float
    delta_min: float
    delta_max: float
    constants: DerivedConstants
    margins: dict[str, float]
    certified: bool
    T_bound: float
    diagnostics: StepDiagnostics

    def as_dict(self) -> dict:
        return {
            'kappa': self.kappa,
            'eps': self.eps,
            'delta_min': self.delta_min,
            'delta_max': self.delta_max,
            'margins': self.margins,
            'certified': self.certified,
            'T_bound': self.T_bound,
            'constants': self.constants.as_dict(),
        }


def operating_point(
    clp: ControlLyapunovPair,
    selection: ParameterSelection,
    kappa: float | None,
    eps: float | None,
    delta_min: float,
    delta_max: float,
    shell: int | None = None,
) -> OperatingPoint:
    """Evaluate the constants at the operating tuple; missing kappa or eps fall back to the certified ones"""
    kappa = selection.kappa if kappa is None else kappa
    eps = selection.eps if eps is None else eps
    moduli_big, moduli_small = selection.moduli_R, selection.moduli_r
    constants = derived_constants(
        clp, moduli_big, kappa, eps, selection.constants.r, selection.constants.R, delta=selection.constants.Delta
    )
    margins = inequality_margins(clp, moduli_big, moduli_small, constants, selection.system.c0)
    decrease, continuity = delta_bounds(moduli_big, moduli_small, constants, selection.system)
    certified = (
        all(margin > 0 for margin in margins.values())
        and delta_max <= min(decrease, continuity)
        and constants.N_ke < 0.5 * constants.Delta * delta_min
    )
    if not certified:
        logger.warning(
            f'operating tuple kappa={kappa}, eps={eps}, delta_max={delta_max} lies outside the certified region; '
            'lemma inequalities are checked empirically along the run'
        )
    c2 = c2_constant(constants.R, delta_max, selection.system.c1, selection.system.sigma2_target)
    diagnostics = StepDiagnostics(
        kappa=kappa,
        eps=eps,
        Delta=constants.Delta,
        N_ke=constants.N_ke,
        C2=c2,
        R=constants.R,
        Rcal_r=moduli_small.Rcal,
        level=0.5 * moduli_big.I,
        shell=shell,
    )
    return OperatingPoint(
        kappa=kappa,
        eps=eps,
        delta_min=delta_min,
        delta_max=delta_max,
        constants=constants,
        margins=margins,
        certified=certified,
        T_bound=entry_time_bound(moduli_big.I, constants, delta_min),
        diagnostics=diagnostics,
    )


COLUMNS = (
    't',
    'control_id',
    'phi',
    'phi_kappa',
    'w2_to_target',
    'shell_index',
    'lemma52_margin',
    'lemma53_margin',
    'prop26_margin',
)


@dataclass
class TrajectoryRecord:
    t: float
    control_id: int
    phi: float
    phi_kappa: float
    w2_to_target: float
    shell_index: int | None
    lemma52_margin: float
    lemma53_margin: float
    prop26_margin: float


@dataclass
class TrajectoryLog:
    particles: int
    dim: int
    knot_times: list[float]
    seed: int = 0
    scenario_hash: str = ''
    records: list[TrajectoryRecord] = field(default_factory=list)
    states: list[EmpiricalMeasure] = field(default_factory=list)

    def append(self, record: TrajectoryRecord, state: EmpiricalMeasure | None) -> None:
        if state is not None and (state.n != self.particles or state.dim != self.dim):
            raise StabError(
                f'record at t={record.t} has a {state.n}x{state.dim} state, log is {self.particles}x{self.dim}'
            )
        self.records.append(record)
        if state is not None:
            self.states.append(state)

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if getattr(r, name) is None else getattr(r, name) for r in self.records], dtype=float)

    def knots(self) -> list[TrajectoryRecord]:
        knot_set = set(self.knot_times)
        return [record for record in self.records if record.t in knot_set]

    @property
    def horizon(self) -> float:
        return self.records[-1].t if self.records else 0.0

    def to_csv(self, path: str) -> None:
        with to_path(path).open('w') as handle:
            writer = csv.writer(handle, lineterminator='\n')
            writer.writerow(COLUMNS)
            for record in self.records:
                writer.writerow([_format_cell(getattr(record, name)) for name in COLUMNS])

    def write_snapshots(self, directory: str, stride: int) -> list[str]:
        if stride < 1:
            return []
        written = []
        folder = to_path(directory)
        folder.mkdir(parents=True, exist_ok=True)
        for index in range(0, len(self.states), stride):
            path = str(folder / f'step_{index:06d}.csv')
            write_measure_csv(self.states[index], path)
            written.append(path)
        return written

    @classmethod
    def from_csv(
        cls, path: str, knot_times: list[float], particles: int, dim: int, seed: int = 0, scenario_hash: str = ''
    ) -> 'TrajectoryLog':
        log = cls(particles=particles, dim=dim, knot_times=list(knot_times), seed=seed, scenario_hash=scenario_hash)
        with to_path(path).open() as handle:
            reader = csv.DictReader(handle)
            if tuple(reader.fieldnames or ()) != COLUMNS:
                raise StabError(f'{path}: unexpected trajectory columns {reader.fieldnames}')
            for row in reader:
                log.records.append(
                    TrajectoryRecord(
                        t=float(row['t']),
                        control_id=int(row['control_id']),
                        phi=float(row['phi']),
                        phi_kappa=float(row['phi_kappa']),
                        w2_to_target=float(row['w2_to_target']),
                        shell_index=int(row['shell_index']) if row['shell_index'] else None,
                        lemma52_margin=float(row['lemma52_margin']),
                        lemma53_margin=float(row['lemma53_margin']),
                        prop26_margin=float(row['prop26_margin']),
                    )
                )
        return log


def _format_cell(value: float | int | None) -> str:
    if value is None:
        return ''
    if isinstance(value, int | np.integer):
        return str(int(value))
    return '%.17g' % value  # noqa: UP031


@dataclass(frozen=True)
class TrajectoryOptions:
    clp: ControlLyapunovPair
    substeps: int | None = None
    max_substep: float = 0.01
    track_phi_kappa: bool = True
    inf_conv: InfConvOptions = field(default_factory=InfConvOptions)
    seed: int = 0
    scenario_hash: str = ''


def _phi_kappa(
    options: TrajectoryOptions, diagnostics: StepDiagnostics | None, m: EmpiricalMeasure, known: FeedbackDecision | None
) -> float:
    if diagnostics is None:
        return math.nan
    if (
        known is not None
        and known.phi_kappa is not None
        and known.diagnostics is not None
        and (known.diagnostics.kappa, known.diagnostics.eps) == (diagnostics.kappa, diagnostics.eps)
    ):
        return known.phi_kappa
    return inf_convolution(options.clp, diagnostics.kappa, diagnostics.eps, m, options.inf_conv).value


def _interval_margins(
    diagnostics: StepDiagnostics | None,
    start: EmpiricalMeasure,
    start_w2: float,
    start_phi_kappa: float,
    elapsed: float,
    state: EmpiricalMeasure,
    phi_kappa: float,
) -> tuple[float, float]:
    """(interval_margin, speed_margin) margins for a state reached `elapsed` after the knot state `start`"""
    if diagnostics is None:
        return math.nan, math.nan
    speed_margin = math.nan
    if start_w2 <= diagnostics.R:
        speed_margin = diagnostics.C2 * elapsed - w2_distance(start, state)
    interval_margin = math.nan
    inside_level = start_phi_kappa <= diagnostics.level + LEVEL_TOLERANCE
    if inside_level and start_w2 > diagnostics.Rcal_r and math.isfinite(phi_kappa):
        interval_margin = (-diagnostics.Delta * elapsed + diagnostics.N_ke) - (phi_kappa - start_phi_kappa)
    return interval_margin, speed_margin


def run_theta_trajectory(
    m_star: EmpiricalMeasure,
    partition: Partition,
    policy: FeedbackPolicy,
    f: VectorField,
    options: TrajectoryOptions,
) -> TrajectoryLog:
    """
    Evaluate the feedback at every knot, hold the control until the next knot and record every
    RK4 substep. Knot records carry the end-of-interval margins of the interval they close.
    """
    clp = options.clp
    target = clp.target
    log = TrajectoryLog(
        particles=m_star.n,
        dim=m_star.dim,
        knot_times=list(partition.times),
        seed=options.seed,
        scenario_hash=options.scenario_hash,
    )
    m = m_star
    previous: tuple[FeedbackDecision, float, EmpiricalMeasure, float, float] | None = None
    for i, t_knot in enumerate(partition.times):
        try:
            decision = policy.decide(m)
            w2_now = w2_distance(target, m)
            diagnostics = decision.diagnostics
            phi_kappa_now = _phi_kappa(options, diagnostics, m, decision)

            shift_margin = math.nan
            if diagnostics is not None and decision.objective is not None:
                if diagnostics.Rcal_r < w2_now <= diagnostics.R:
                    shift_margin = -2 * diagnostics.Delta - decision.objective

            interval_margin, speed_margin = math.nan, math.nan
            if previous is not None:
                prev_decision, prev_t, prev_m, prev_w2, prev_phi_kappa = previous
                prev_diag = prev_decision.diagnostics
                closing = _phi_kappa(options, prev_diag, m, decision)
                interval_margin, speed_margin = _interval_margins(
                    prev_diag, prev_m, prev_w2, prev_phi_kappa, t_knot - prev_t, m, closing
                )
        except StabError as err:
            raise TrajectoryAbortedError(f'trajectory stopped at knot t={t_knot}: {err}', log, err) from err

        log.append(
            TrajectoryRecord(
                t=t_knot,
                control_id=decision.control_index,
                phi=clp.phi(m),
                phi_kappa=phi_kappa_now,
                w2_to_target=w2_now,
                shell_index=decision.shell,
                lemma52_margin=shift_margin,
                lemma53_margin=interval_margin,
                prop26_margin=speed_margin,
            ),
            m,
        )
        if i == len(partition.times) - 1:
            break

        t_next = partition.times[i + 1]
        substeps = options.substeps or default_substeps(t_knot, t_next, options.max_substep)
        try:
            segment = flow_segment(m, f, decision.control, t_knot, t_next, substeps)
            for t, state in zip(segment.times[1:-1], segment.states[1:-1], strict=True):
                phi_kappa = _phi_kappa(options, diagnostics, state, None) if options.track_phi_kappa else math.nan
                interval_sub, speed_sub = _interval_margins(
                    diagnostics, m, w2_now, phi_kappa_now, t - t_knot, state, phi_kappa
                )
                log.append(
                    TrajectoryRecord(
                        t=t,
                        control_id=decision.control_index,
                        phi=clp.phi(state),
                        phi_kappa=phi_kappa,
                        w2_to_target=w2_distance(target, state),
                        shell_index=decision.shell,
                        lemma52_margin=math.nan,
                        lemma53_margin=interval_sub,
                        prop26_margin=speed_sub,
                    ),
                    state,
                )
        except StabError as err:
            raise TrajectoryAbortedError(f'trajectory stopped after knot t={t_knot}: {err}', log, err) from err
        previous = (decision, t_knot, m, w2_now, phi_kappa_now)
        m = segment.final

    logger.info(
        f'trajectory finished: {len(log.records)} records, final W2 to target {log.records[-1].w2_to_target:.6g}'
    )
    return log
