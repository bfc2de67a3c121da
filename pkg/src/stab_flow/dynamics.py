"""
Controlled mean-field vector fields and the particle flow that realises one held-control segment.
"""

import itertools
import math
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
from loguru import logger

from stab_flow.errors import (
    ConfigurationError,
    DimensionMismatchError,
    FieldEvaluationError,
    FlowBlowUpError,
    StabError,
)
from stab_flow.measures import EmpiricalMeasure, w2_distance
from stab_flow.sampling import MeasureSampler

# fn(query points (k, d), measure points (N, d), control (d,)) -> velocities (k, d)
FieldFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]

DEFAULT_MAX_SUBSTEP = 0.01
LIPSCHITZ_SAFETY = 1.2


@dataclass(frozen=True)
class VectorField:
    label: str
    fn: FieldFn
    declared_c0: float | None = None
    analytic_c0: float | None = None
    params: dict = field(default_factory=dict)

    def __call__(self, x: np.ndarray, m: EmpiricalMeasure, u: np.ndarray) -> np.ndarray:
        return eval_field(self, x, m, u)

    def velocities(self, points: np.ndarray, u: np.ndarray) -> np.ndarray:
        """f(x_j, m, u) for every particle of the measure with the given positions"""
        values = np.asarray(self.fn(points, points, np.asarray(u, dtype=float)), dtype=float)
        if not np.all(np.isfinite(values)):
            raise FieldEvaluationError(f'field {self.label} returned a non-finite velocity')
        return values

    @property
    def c0(self) -> float | None:
        """declared constant first, analytic second"""
        return self.declared_c0 if self.declared_c0 is not None else self.analytic_c0


def _linear_steer(gain: float) -> FieldFn:
    def fn(x: np.ndarray, points: np.ndarray, u: np.ndarray) -> np.ndarray:  # noqa: ARG001
        return -gain * x + u

    return fn


def _mean_attract(gain: float) -> FieldFn:
    def fn(x: np.ndarray, points: np.ndarray, u: np.ndarray) -> np.ndarray:
        return -gain * (x - points.mean(axis=0)) + u

    return fn


def _mean_drift(gain: float) -> FieldFn:
    def fn(x: np.ndarray, points: np.ndarray, u: np.ndarray) -> np.ndarray:
        return np.broadcast_to(gain * points.mean(axis=0) + u, x.shape).copy()

    return fn


def _zero() -> FieldFn:
    def fn(x: np.ndarray, points: np.ndarray, u: np.ndarray) -> np.ndarray:  # noqa: ARG001
        return np.zeros_like(x)

    return fn


def make_field(label: str, declared_c0: float | None = None, gain: float = 1.0) -> VectorField:
    """
    Build one of the example systems by label.

    linear_steer   f = -g x + u                 (C0 = g)
    mean_attract   f = -g (x - mean(m)) + u     (C0 = 2 g)
    mean_drift     f = g mean(m) + u            (C0 = g)
    zero           f = 0                        (C0 = 0)
    """
    builders = {
        'linear_steer': lambda: (_linear_steer(gain), abs(gain)),
        'mean_attract': lambda: (_mean_attract(gain), 2 * abs(gain)),
        'mean_drift': lambda: (_mean_drift(gain), abs(gain)),
        'zero': lambda: (_zero(), 0.0),
    }
    if label not in builders:
        raise ConfigurationError(f'unknown field label {label!r}, supported: {sorted(builders)}')
    fn, c0 = builders[label]()
    params = {'gain': gain} if label != 'zero' else {}
    return VectorField(label=label, fn=fn, declared_c0=declared_c0, analytic_c0=c0, params=params)


SUPPORTED_FIELDS = ('linear_steer', 'mean_attract', 'mean_drift', 'zero')


@dataclass(frozen=True, eq=False)
class ControlSet:
    """A finite control set U, held in a fixed order (argmin ties go to the earliest entry)"""

    controls: np.ndarray
    labels: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        controls = np.array(self.controls, dtype=float)
        if controls.ndim == 1:
            controls = controls[:, None]
        if controls.ndim != 2 or controls.shape[0] == 0:
            raise ConfigurationError('control set must hold at least one control vector')
        if not np.all(np.isfinite(controls)):
            raise ConfigurationError('control vectors must be finite')
        if np.unique(controls, axis=0).shape[0] != controls.shape[0]:
            raise ConfigurationError('control set contains duplicate controls')
        labels = tuple(self.labels) or tuple(f'u{i}' for i in range(controls.shape[0]))
        if len(labels) != controls.shape[0]:
            raise ConfigurationError(f'{len(labels)} labels for {controls.shape[0]} controls')
        controls.setflags(write=False)
        object.__setattr__(self, 'controls', controls)
        object.__setattr__(self, 'labels', labels)

    @classmethod
    def lattice(cls, dim: int, bound: float, steps: int) -> 'ControlSet':
        """steps^dim grid on [-bound, bound]^dim, with the zero control first when it is on the grid"""
        if steps < 1 or bound < 0:
            raise ConfigurationError(f'lattice needs steps >= 1 and bound >= 0, got {steps}, {bound}')
        axis = np.linspace(-bound, bound, steps) if steps > 1 else np.zeros(1)
        grid = [np.array(p) for p in itertools.product(axis, repeat=dim)]
        grid.sort(key=lambda p: 0 if np.allclose(p, 0) else 1)
        return cls(np.stack(grid))

    def __len__(self) -> int:
        return self.controls.shape[0]

    def __getitem__(self, index: int) -> np.ndarray:
        return self.controls[index]

    @property
    def dim(self) -> int:
        return self.controls.shape[1]

    @property
    def neutral_index(self) -> int:
        """index of the zero control if present, else 0"""
        zeros = np.flatnonzero(np.all(self.controls == 0, axis=1))
        return int(zeros[0]) if zeros.size else 0


@dataclass(frozen=True)
class FlowSegment:
    times: list[float]
    states: list[EmpiricalMeasure]
    control: np.ndarray
    substeps: int

    @property
    def final(self) -> EmpiricalMeasure:
        return self.states[-1]


def eval_field(f: VectorField, x: np.ndarray, m: EmpiricalMeasure, u: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape != (m.dim,):
        raise DimensionMismatchError(f'point of dimension {x.shape[0]} evaluated against a {m.dim}-d measure')
    value = np.asarray(f.fn(x[None, :], m.points, np.asarray(u, dtype=float)), dtype=float).reshape(-1)
    if not np.all(np.isfinite(value)):
        raise FieldEvaluationError(f'field {f.label} returned a non-finite value at {x.tolist()}')
    return value


def estimate_lipschitz(
    f: VectorField,
    sampler: MeasureSampler,
    controls: ControlSet,
    trials: int = 200,
    radius: float = 1.0,
    use_analytic: bool = True,
) -> float:
    """
    C0 for f: the analytic constant when the field has one, else the largest sampled ratio
    |f(x,mu,u) - f(y,nu,u)| / (|x-y| + W2(mu,nu)), inflated by 1.2.
    """
    if use_analytic and f.analytic_c0 is not None:
        return f.analytic_c0
    worst = sampled_lipschitz_ratio(f, sampler, controls, trials, radius)
    return LIPSCHITZ_SAFETY * worst


def sampled_lipschitz_ratio(
    f: VectorField,
    sampler: MeasureSampler,
    controls: ControlSet,
    trials: int = 200,
    radius: float = 1.0,
) -> float:
    rng = sampler.rng
    worst = 0.0
    used = 0
    for trial in range(trials):
        mu, nu = sampler.close_pair(radius, 0.5 * radius)
        x = mu.points[rng.integers(mu.n)]
        if trial % 2 == 0:
            # same measure, different points
            nu = mu
            y = x + rng.standard_normal(x.shape) * 0.5 * radius
        else:
            y = x
        u = controls[rng.integers(len(controls))]
        denominator = float(np.linalg.norm(x - y)) + (0.0 if nu is mu else w2_distance(mu, nu))
        if denominator <= 1e-14:
            continue
        used += 1
        worst = max(worst, float(np.linalg.norm(eval_field(f, x, mu, u) - eval_field(f, y, nu, u))) / denominator)
    if used == 0:
        raise StabError('every Lipschitz trial had a zero denominator')
    return worst


def sublinear_bound(f: VectorField, c0: float, controls: ControlSet, dim: int) -> float:
    """C1 with |f(x, mu, u)| <= C1 (1 + |x| + sigma2(mu)), clamped away from zero"""
    origin = EmpiricalMeasure(np.zeros((1, dim)))
    at_origin = max(float(np.linalg.norm(eval_field(f, np.zeros(dim), origin, u))) for u in controls.controls)
    return max(c0, at_origin, 1e-12)


def default_substeps(t_start: float, t_end: float, max_substep: float = DEFAULT_MAX_SUBSTEP) -> int:
    return max(1, math.ceil((t_end - t_start) / max_substep - 1e-9))


def flow_segment(
    m0: EmpiricalMeasure,
    f: VectorField,
    u: np.ndarray,
    t_start: float,
    t_end: float,
    substeps: int | None = None,
) -> FlowSegment:
    """
    Classical RK4 on the coupled particle system x_j' = f(x_j, m(t), u), with m(t) at each
    stage taken as the empirical measure of the stage positions. States are recorded at
    every substep boundary, the first one being m0 itself.
    """
    if t_end <= t_start:
        raise StabError(f'segment end {t_end} must exceed its start {t_start}')
    if substeps is None:
        substeps = default_substeps(t_start, t_end)
    if substeps < 1:
        raise StabError(f'substeps must be at least 1, got {substeps}')

    u = np.asarray(u, dtype=float)
    h = (t_end - t_start) / substeps
    times = [t_start]
    states = [m0]
    x = m0.points.copy()
    for step in range(substeps):
        try:
            k1 = f.velocities(x, u)
            k2 = f.velocities(x + 0.5 * h * k1, u)
            k3 = f.velocities(x + 0.5 * h * k2, u)
            k4 = f.velocities(x + h * k3, u)
        except FieldEvaluationError as err:
            raise FlowBlowUpError(f'flow left the finite floats after t={times[-1]}', times[-1]) from err
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise FlowBlowUpError(f'flow left the finite floats after t={times[-1]}', times[-1])
        times.append(t_end if step == substeps - 1 else t_start + (step + 1) * h)
        states.append(EmpiricalMeasure(x))
    logger.debug(f'flowed {m0.n} particles over [{t_start}, {t_end}] in {substeps} RK4 steps')
    return FlowSegment(times=times, states=states, control=u, substeps=substeps)


def c2_constant(radius: float, delta: float, c1: float, sigma2_target: float) -> float:
    """Speed bound W2(m_t, m_ti) <= C2 (t - t_i) for segments starting in B_radius"""
    growth = math.exp(c1 * delta)
    return c1 * growth * (1 + 2 * (c1 * delta + sigma2_target + radius) * math.exp(2 * c1 * delta))


def c3_constant(radius: float, delta: float, c0: float, c1: float, sigma2_target: float) -> float:
    """Drift-difference bound; equals 2 C0 C2"""
    c2 = c2_constant(radius, delta, c1, sigma2_target)
    return c0 * (c2 + c2)


def drift_difference_norm(f: VectorField, start: EmpiricalMeasure, current: EmpiricalMeasure, u: np.ndarray) -> float:
    """
    || f(X(t, x), m_t, u) - f(x, m_ti, u) ||_{L2(m_ti)}, with particles of current paired to
    start by index (characteristics keep the ordering).
    """
    if start.n != current.n or start.dim != current.dim:
        raise DimensionMismatchError('drift difference needs two states of the same particle system')
    diff = f.velocities(current.points, u) - f.velocities(start.points, u)
    return float(np.sqrt(np.mean(np.sum(diff * diff, axis=1))))
