"""
Nested level-set shells and the global feedback that dispatches each measure to its shell's
local feedback.
"""

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from cpg_utils import to_path
from loguru import logger

from stab_flow.checks import PropertyResult
from stab_flow.dynamics import ControlSet, VectorField, c2_constant
from stab_flow.errors import BisectionError, ConfigurationError, InfeasibleParametersError, OutOfRangeError, StabError
from stab_flow.lyapunov import ControlLyapunovPair, radius_rcal
from stab_flow.measures import EmpiricalMeasure, w2_distance
from stab_flow.proximal import InfConvOptions, inf_convolution
from stab_flow.sampling import MeasureSampler
from stab_flow.stabilize import (
    FeedbackDecision,
    FeedbackPolicy,
    SelectorConfig,
    StepDiagnostics,
    SystemConstants,
    local_feedback,
    operating_point,
    select_parameters,
)

# nextafter nudges allowed when growing Q_{i+1}
MAX_NUDGES = 10_000


@dataclass(frozen=True)
class ShellSettings:
    """Operating overrides shared by every shell; None keeps the certified value"""

    kappa: float | None = None
    eps_rel: float | None = None
    delta_max: float | None = None
    delta_min: float | None = None
    dwell: float | None = None
    selector: SelectorConfig = field(default_factory=SelectorConfig)


@dataclass(frozen=True)
class ShellRow:
    index: int
    Q: float
    q: float
    Rcal_Q: float
    Rcal_q: float
    level: float
    kappa: float
    eps: float
    delta_min: float
    delta_max: float
    T: float
    C2: float
    Delta: float
    N_ke: float
    step_bound: float
    certified: bool
    certified_kappa: float
    certified_eps: float
    certified_delta_max: float
    certified_T: float

    @property
    def diagnostics(self) -> StepDiagnostics:
        return StepDiagnostics(
            kappa=self.kappa,
            eps=self.eps,
            Delta=self.Delta,
            N_ke=self.N_ke,
            C2=self.C2,
            R=self.Q,
            Rcal_r=self.Rcal_q,
            level=self.level,
            shell=self.index,
        )


ROW_FIELDS = tuple(f.name for f in fields(ShellRow))


@dataclass(frozen=True)
class ShellTable:
    rows: tuple[ShellRow, ...]
    below: float

    def __post_init__(self) -> None:
        if not self.rows:
            raise ConfigurationError('a shell table needs at least one shell')
        indices = [row.index for row in self.rows]
        if indices != list(range(indices[0], indices[0] + len(indices))):
            raise ConfigurationError(f'shell indices must be consecutive, got {indices}')

    @property
    def i_min(self) -> int:
        return self.rows[0].index

    @property
    def i_max(self) -> int:
        return self.rows[-1].index

    def row(self, index: int) -> ShellRow:
        if not self.i_min <= index <= self.i_max:
            raise OutOfRangeError(f'shell {index} is outside [{self.i_min}, {self.i_max}]')
        return self.rows[index - self.i_min]

    def q_value(self, index: int) -> float:
        """Q_index, including the one radius stored below the innermost shell"""
        if index == self.i_min - 1:
            return self.below
        return self.row(index).Q

    def invariant_flags(self) -> dict[str, list[bool]]:
        """2 Q_i <= Rcal(Q_{i+1}) and q_{i+1} < Rcal(Q_i) <= Q_i for every stored i"""
        doubling = [2 * a.Q <= b.Rcal_Q for a, b in zip(self.rows, self.rows[1:], strict=False)]
        nesting = [b.q < a.Rcal_Q <= a.Q for a, b in zip(self.rows, self.rows[1:], strict=False)]
        increasing = [a.Q < b.Q for a, b in zip(self.rows, self.rows[1:], strict=False)]
        return {'doubling': doubling, 'nesting': nesting, 'increasing': increasing}

    def invariant_checks(self) -> list[PropertyResult]:
        return [PropertyResult.from_flags(f'shells_{name}', flags) for name, flags in self.invariant_flags().items()]

    # quantities of the global stabilization statement

    def n_of(self, radius: float) -> int:
        """Smallest shell whose level set contains B_radius, tested as radius <= Rcal(Q_i)"""
        for row in self.rows:
            if radius <= row.Rcal_Q:
                return row.index
        raise OutOfRangeError(f'B_{radius} is not inside any shell; raise i_max above {self.i_max}')

    def k_of(self, radius: float) -> int:
        """Largest shell with Q_i <= radius"""
        inside = [row.index for row in self.rows if row.Q <= radius]
        if not inside:
            raise OutOfRangeError(f'no shell fits inside B_{radius}; lower i_min below {self.i_min}')
        return max(inside)

    def m_of(self, radius: float) -> float:
        return self.row(self.n_of(radius)).Q

    def sampling_step(self, r: float, radius: float) -> float:
        """min over K(r) <= i <= N(R) of delta_i, capped by Q_{K-1} / C2(Q_N)"""
        k, n = self.k_of(r), self.n_of(radius)
        steps = [self.row(i).delta_max for i in range(min(k, n), n + 1)]
        return min(min(steps), self.q_value(k - 1) / self.row(n).C2)

    def time_bound(self, r: float, radius: float) -> float:
        """Sum over K(r) < i <= N(R) of T_i + delta(r, R)"""
        k, n = self.k_of(r), self.n_of(radius)
        step = self.sampling_step(r, radius)
        return sum(self.row(i).T + step for i in range(k + 1, n + 1))

    def as_dict(self) -> dict:
        return {'below': self.below, 'rows': [asdict(row) for row in self.rows]}

    def to_json(self, path: str) -> None:
        with to_path(path).open('w') as handle:
            json.dump(self.as_dict(), handle, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> 'ShellTable':
        return cls(rows=tuple(ShellRow(**row) for row in data['rows']), below=float(data['below']))

    @classmethod
    def from_json(cls, path: str) -> 'ShellTable':
        with to_path(path).open() as handle:
            return cls.from_dict(json.load(handle))

    def to_csv(self, path: str) -> None:
        flags = self.invariant_flags()
        with to_path(path).open('w') as handle:
            writer = csv.writer(handle, lineterminator='\n')
            writer.writerow([*ROW_FIELDS, 'doubling_holds'])
            for position, row in enumerate(self.rows):
                doubling = flags['doubling'][position] if position < len(flags['doubling']) else ''
                writer.writerow([*(_cell(getattr(row, name)) for name in ROW_FIELDS), doubling])


def _cell(value: object) -> str:
    if isinstance(value, float):
        return '%.17g' % value  # noqa: UP031
    return str(value)


def _rcal(clp: ControlLyapunovPair, radius: float, sampler: MeasureSampler | None) -> float:
    try:
        return radius_rcal(clp, radius, sampler)
    except BisectionError as err:
        raise BisectionError(f'Rcal search failed at Q={radius}: {err}') from err


def shell_radii(
    clp: ControlLyapunovPair, q0: float, i_min: int, i_max: int, sampler: MeasureSampler | None = None
) -> dict[int, float]:
    """
    Q_0 = q0, Q_{i+1} the smallest radius found with Rcal(Q_{i+1}) >= 2 Q_i, and downwards
    Q_{i-1} = Rcal(Q_i) / 2. One extra radius below i_min is kept for q_{i_min}.
    """
    if q0 <= 0:
        raise ConfigurationError(f'Q0 must be positive, got {q0}')
    if not i_min < 0 < i_max:
        raise ConfigurationError(f'need i_min < 0 < i_max, got [{i_min}, {i_max}]')
    radii = {0: q0}
    for i in range(0, i_max):
        inner = radii[i]
        ratio = inner / _rcal(clp, inner, sampler)
        candidate = 2 * inner * ratio
        for _ in range(MAX_NUDGES):
            if _rcal(clp, candidate, sampler) >= 2 * inner:
                break
            candidate = float(np.nextafter(candidate, math.inf))
        # sampled Rcal can sit well below the linear guess
        while _rcal(clp, candidate, sampler) < 2 * inner:
            candidate *= 1.05
        radii[i + 1] = candidate
    for i in range(0, i_min - 1, -1):
        radii[i - 1] = 0.5 * _rcal(clp, radii[i], sampler)
    return radii


def build_shells(
    clp: ControlLyapunovPair,
    f: VectorField,
    controls: ControlSet,
    system: SystemConstants,
    q0: float,
    i_min: int,
    i_max: int,
    settings: ShellSettings | None = None,
    sampler: MeasureSampler | None = None,
) -> ShellTable:
    """Radii, then a certified tuple per shell from select_parameters(q_i, Q_i), then the operating values"""
    settings = settings or ShellSettings()
    radii = shell_radii(clp, q0, i_min, i_max, sampler)
    rows = []
    for i in range(i_min, i_max + 1):
        big = radii[i]
        rcal_big = _rcal(clp, big, sampler)
        small = 0.5 * _rcal(clp, radii[i - 1], sampler)
        try:
            selection = select_parameters(clp, f, controls, small, big, system, settings.selector, sampler)
        except InfeasibleParametersError as err:
            raise InfeasibleParametersError(f'shell {i} (q={small:.6g}, Q={big:.6g}): {err}', err.last_failed) from err
        delta_max = settings.delta_max or selection.delta_max
        delta_min = settings.delta_min or min(delta_max, selection.delta_min)
        eps = settings.eps_rel * big if settings.eps_rel is not None else None
        point = operating_point(clp, selection, settings.kappa, eps, delta_min, delta_max, shell=i)
        dwell = settings.dwell if settings.dwell is not None else point.T_bound + delta_max
        c2 = c2_constant(big, delta_max, system.c1, system.sigma2_target)
        rows.append(
            ShellRow(
                index=i,
                Q=big,
                q=small,
                Rcal_Q=rcal_big,
                Rcal_q=_rcal(clp, small, sampler),
                level=0.5 * selection.moduli_R.I,
                kappa=point.kappa,
                eps=point.eps,
                delta_min=delta_min,
                delta_max=delta_max,
                T=dwell,
                C2=c2,
                Delta=point.constants.Delta,
                N_ke=point.constants.N_ke,
                step_bound=min(delta_max, radii[i - 1] / c2),
                certified=point.certified,
                certified_kappa=selection.kappa,
                certified_eps=selection.eps,
                certified_delta_max=selection.delta_max,
                certified_T=selection.T_certified,
            )
        )
    table = ShellTable(rows=tuple(rows), below=radii[i_min - 1])
    logger.info(f'built {len(rows)} shells, Q from {rows[0].Q:.6g} to {rows[-1].Q:.6g}')
    return table


def global_feedback(
    shells: ShellTable,
    clp: ControlLyapunovPair,
    f: VectorField,
    controls: ControlSet,
    fallback_index: int | None = None,
    opts: InfConvOptions | None = None,
    level_tolerance: float = 1e-9,
    atom_tolerance: float = 1e-12,
) -> FeedbackPolicy:
    """
    k-hat: find the smallest i with phi_{kappa_i}(m) <= I(Q_i)/2, i.e. m in G_{Q_i} but not in
    G_{Q_{i-1}}, and apply shell i's local feedback. Inside the innermost level set the
    innermost feedback applies; at the target the fallback control is returned.
    """
    fallback = controls.neutral_index if fallback_index is None else fallback_index
    if not 0 <= fallback < len(controls):
        raise ConfigurationError(f'fallback control index {fallback} is outside the control set')
    policies = {
        row.index: local_feedback(clp, f, controls, row.kappa, row.eps, opts, row.diagnostics, shell=row.index)
        for row in shells.rows
    }
    # one phi_kappa per kappa, at the tightest eps any shell uses with it
    eps_for_kappa: dict[float, float] = {}
    for row in shells.rows:
        eps_for_kappa[row.kappa] = min(row.eps, eps_for_kappa.get(row.kappa, math.inf))

    def classify(m: EmpiricalMeasure) -> int:
        values: dict[float, float] = {}

        def member(row: ShellRow) -> bool:
            if row.kappa not in values:
                values[row.kappa] = inf_convolution(clp, row.kappa, eps_for_kappa[row.kappa], m, opts).value
            return values[row.kappa] <= row.level + level_tolerance

        outer = shells.rows[-1]
        if not member(outer):
            raise OutOfRangeError(
                f'measure at W2={w2_distance(clp.target, m):.6g} lies outside the outermost shell '
                f'(Q={outer.Q:.6g}); raise i_max above {shells.i_max}'
            )
        index = shells.i_max
        for row in reversed(shells.rows[:-1]):
            if not member(row):
                break
            index = row.index
        return index

    def decide(m: EmpiricalMeasure) -> FeedbackDecision:
        if w2_distance(clp.target, m) <= atom_tolerance:
            return FeedbackDecision(fallback, controls[fallback], None, 0.0, None, shells.row(shells.i_min).diagnostics)
        index = classify(m)
        return policies[index].decide(m)

    return FeedbackPolicy(kind='global', controls=controls, decide=decide)


def shell_descent_checks(
    knots: list[tuple[float, int | None, float]],
    shells: ShellTable,
    r: float,
    horizon: float,
) -> list[PropertyResult]:
    """
    Shell index nonincreasing from knot to knot, each shell above K(r) left within T_i + delta_i,
    and every state inside B_{Q_s} of its starting shell s. `knots` holds (t, shell, w2).
    """
    if not knots:
        raise StabError('shell descent checks need at least one knot')
    lowered = [shells.i_min - 1 if shell is None else shell for _, shell, _ in knots]
    monotone = [b <= a for a, b in zip(lowered, lowered[1:], strict=False)]

    floor = shells.k_of(r) if r >= shells.rows[0].Q else shells.i_min
    dwell_margins = []
    entered_at, current = knots[0][0], lowered[0]
    for (t, _, _), shell in zip(knots[1:], lowered[1:], strict=True):
        if shell != current:
            if current > floor and current >= shells.i_min:
                row = shells.row(current)
                dwell_margins.append(row.T + row.delta_max - (t - entered_at))
            entered_at, current = t, shell
    if current > floor and current >= shells.i_min:
        row = shells.row(current)
        dwell_margins.append(row.T + row.delta_max - (horizon - entered_at))

    start = lowered[0]
    start_radius = shells.q_value(start)
    invariance = [start_radius - w2 for _, _, w2 in knots]
    return [
        PropertyResult.from_flags('shell_index_monotone', monotone),
        PropertyResult.from_margins('shell_dwell', dwell_margins, floor_shell=floor),
        PropertyResult.from_margins('shell_invariance', invariance, start_shell=start),
    ]
