"""
Scenario files: a TOML layer over the packaged config_template.toml, validated into a frozen
Scenario, and the objects a run is built from.
"""

import dataclasses
import importlib
import math
from dataclasses import dataclass, field
from functools import cache
from importlib import resources
from typing import Any

import numpy as np
from cpg_utils import config, to_path
from loguru import logger

from stab_flow.dynamics import (
    SUPPORTED_FIELDS,
    ControlSet,
    VectorField,
    estimate_lipschitz,
    make_field,
    sublinear_bound,
)
from stab_flow.errors import ConfigurationError, UnsupportedCLPError
from stab_flow.lyapunov import ControlLyapunovPair, builtin_quadratic_clp, calibrate_eps0
from stab_flow.measures import EmpiricalMeasure, read_measure_csv, second_moment_sqrt
from stab_flow.sampling import MeasureSampler
from stab_flow.stabilize import SelectorConfig, SystemConstants
from stab_flow.utils import digest, sub_seed

SUPPORTED_SCHEMAS = (1,)
MODES = ('local', 'global')
POLICIES = ('local', 'constant')
INITIAL_KINDS = ('sphere', 'ball', 'file')
TARGET_KINDS = ('point', 'file')


@dataclass(frozen=True)
class FieldSpec:
    label: str
    gain: float = 1.0
    declared_c0: float | None = None


@dataclass(frozen=True)
class ControlSpec:
    kind: str = 'lattice'
    bound: float = 1.0
    steps: int = 3
    values: tuple[tuple[float, ...], ...] = ()


@dataclass(frozen=True)
class ClpSpec:
    kind: str = 'builtin'
    plugin: str | None = None
    eps0: float = 1.0
    calibrate: bool = True


@dataclass(frozen=True)
class MeasureSpec:
    kind: str
    radius: float | None = None
    point: tuple[float, ...] | None = None
    path: str | None = None


@dataclass(frozen=True)
class PartitionSpec:
    rule: str = 'uniform'
    delta_max: float | None = None
    delta_min: float | None = None


@dataclass(frozen=True)
class FeedbackSpec:
    policy: str = 'local'
    constant_control: int = 0
    fallback_control: int | None = None
    kappa: float | None = None
    eps: float | None = None
    deadline: float | None = None
    probes: int = 16
    track_phi_kappa: bool = True


@dataclass(frozen=True)
class ShellSpec:
    q0: float = 1.0
    i_min: int = -4
    i_max: int = 4
    eps_rel: float | None = None
    dwell: float | None = None
    R_sweep: tuple[float, ...] = (4.0, 2.0, 1.0, 0.5)


@dataclass(frozen=True)
class Tolerances:
    level: float = 1e-9
    bound: float = 1e-6
    atom: float = 1e-12
    ekeland: float = 1e-9


@dataclass(frozen=True)
class VerifySpec:
    oracle_trials: int = 50
    metric_triples: int = 200
    moreau_samples: int = 20
    moreau_kappas: tuple[float, ...] = (0.25, 0.5, 1.0)
    ekeland_probes: int = 64
    subgradient_instances: int = 20
    subgradient_probes: int = 100
    taylor_trials: int = 100
    taylor_taus: tuple[float, ...] = (1e-3, 1e-2, 1e-1)
    lipschitz_trials: int = 200
    lemma_horizon: float = 1.0


@dataclass(frozen=True)
class Scenario:
    name: str
    mode: str
    dimension: int
    particles: int
    seed: int
    r: float
    R: float
    horizon: float
    field: FieldSpec
    controls: ControlSpec
    clp: ClpSpec
    target: MeasureSpec
    initial: MeasureSpec
    partition: PartitionSpec
    max_substep: float
    substeps: int | None
    feedback: FeedbackSpec
    selector: SelectorConfig
    shells: ShellSpec
    tolerances: Tolerances
    verify: VerifySpec
    snapshot_stride: int
    schema_version: int = 1
    source: str = field(default='', compare=False)

    def as_dict(self) -> dict:
        data = dataclasses.asdict(self)
        data.pop('source')
        return data

    @property
    def hash(self) -> str:
        return digest(self.as_dict())

    def with_seed(self, seed: int) -> 'Scenario':
        return dataclasses.replace(self, seed=seed)


@cache
def template_path() -> str:
    return str(resources.files('stab_flow') / 'config_template.toml')


def _get(*keys: str, default: Any = ...) -> Any:
    path = ['scenario', *keys]
    try:
        if default is ...:
            return config.config_retrieve(path)
        return config.config_retrieve(path, default)
    except (KeyError, config.ConfigError) as err:
        raise ConfigurationError(f'missing scenario key {".".join(path)}') from err


def _number(*keys: str, positive: bool = False, optional: bool = False) -> float | None:
    value = _get(*keys, default=None) if optional else _get(*keys)
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, int | float) or not math.isfinite(value):
        raise ConfigurationError(f'scenario.{".".join(keys)} must be a finite number, got {value!r}')
    if positive and value <= 0:
        raise ConfigurationError(f'scenario.{".".join(keys)} must be positive, got {value}')
    return float(value)


def _integer(*keys: str, minimum: int | None = None, optional: bool = False) -> int | None:
    value = _get(*keys, default=None) if optional else _get(*keys)
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigurationError(f'scenario.{".".join(keys)} must be an integer, got {value!r}')
    if minimum is not None and value < minimum:
        raise ConfigurationError(f'scenario.{".".join(keys)} must be at least {minimum}, got {value}')
    return value


def _choice(*keys: str, options: tuple[str, ...]) -> str:
    value = _get(*keys)
    if value not in options:
        raise ConfigurationError(f'scenario.{".".join(keys)}={value!r} is not one of: {", ".join(options)}')
    return value


def _floats(*keys: str, optional: bool = False) -> tuple[float, ...] | None:
    value = _get(*keys, default=None) if optional else _get(*keys)
    if value is None:
        return None
    try:
        return tuple(float(v) for v in value)
    except (TypeError, ValueError) as err:
        raise ConfigurationError(f'scenario.{".".join(keys)} must be a list of numbers') from err


def _resolve(path: str | None, base: str) -> str | None:
    if path is None:
        return None
    candidate = to_path(path)
    if not candidate.is_absolute():
        candidate = to_path(base).parent / path
    if not candidate.exists():
        raise ConfigurationError(f'referenced file {path} does not exist')
    return str(candidate)


def load_scenario(path: str) -> Scenario:
    """
    Layer the scenario file over the packaged template and validate every field.
    """
    if not to_path(path).exists():
        raise ConfigurationError(f'scenario file {path} does not exist')
    config.set_config_paths([template_path(), str(path)])

    version = _integer('schema_version')
    if version not in SUPPORTED_SCHEMAS:
        raise ConfigurationError(f'schema_version {version} is not supported ({SUPPORTED_SCHEMAS})')

    label = _get('field', 'label')
    if label not in SUPPORTED_FIELDS:
        raise ConfigurationError(f'unknown field label {label!r}, supported: {", ".join(SUPPORTED_FIELDS)}')

    r = _number('r', positive=True)
    radius = _number('R', positive=True)
    if r >= radius:
        raise ConfigurationError(f'scenario.r={r} must be smaller than scenario.R={radius}')

    values = _get('controls', 'values', default=None)
    controls = ControlSpec(
        kind=_choice('controls', 'kind', options=('lattice', 'list')),
        bound=_number('controls', 'bound'),
        steps=_integer('controls', 'steps', minimum=1),
        values=tuple(tuple(float(x) for x in np.atleast_1d(v)) for v in values) if values is not None else (),
    )
    if controls.kind == 'list' and not controls.values:
        raise ConfigurationError('scenario.controls.values is required for kind = "list"')

    clp = ClpSpec(
        kind=_choice('clp', 'kind', options=('builtin', 'plugin')),
        plugin=_get('clp', 'plugin', default=None),
        eps0=_number('clp', 'eps0', positive=True),
        calibrate=bool(_get('clp', 'calibrate')),
    )
    if clp.kind == 'plugin' and (not clp.plugin or ':' not in clp.plugin):
        raise ConfigurationError('scenario.clp.plugin must read "module:function" for kind = "plugin"')

    target = MeasureSpec(
        kind=_choice('target', 'kind', options=TARGET_KINDS),
        point=_floats('target', 'point', optional=True),
        path=_resolve(_get('target', 'path', default=None), path),
    )
    initial = MeasureSpec(
        kind=_choice('initial', 'kind', options=INITIAL_KINDS),
        radius=_number('initial', 'radius', positive=True, optional=True),
        path=_resolve(_get('initial', 'path', default=None), path),
    )
    for name, spec in (('target', target), ('initial', initial)):
        if spec.kind == 'file' and spec.path is None:
            raise ConfigurationError(f'scenario.{name}.path is required for kind = "file"')
    if initial.kind in ('sphere', 'ball') and initial.radius is None:
        raise ConfigurationError(f'scenario.initial.radius is required for kind = "{initial.kind}"')

    partition = PartitionSpec(
        rule=_choice('partition', 'rule', options=('uniform', 'jittered')),
        delta_max=_number('partition', 'delta_max', positive=True, optional=True),
        delta_min=_number('partition', 'delta_min', positive=True, optional=True),
    )
    if partition.delta_max and partition.delta_min and partition.delta_min > partition.delta_max:
        raise ConfigurationError('scenario.partition.delta_min exceeds delta_max')

    feedback = FeedbackSpec(
        policy=_choice('feedback', 'policy', options=POLICIES),
        constant_control=_integer('feedback', 'constant_control', minimum=0),
        fallback_control=_integer('feedback', 'fallback_control', minimum=0, optional=True),
        kappa=_number('feedback', 'kappa', positive=True, optional=True),
        eps=_number('feedback', 'eps', positive=True, optional=True),
        deadline=_number('feedback', 'deadline', positive=True, optional=True),
        probes=_integer('feedback', 'probes', minimum=1),
        track_phi_kappa=bool(_get('feedback', 'track_phi_kappa')),
    )
    if feedback.kappa is not None and feedback.kappa > 1:
        raise ConfigurationError(f'scenario.feedback.kappa must lie in (0, 1], got {feedback.kappa}')

    shells = ShellSpec(
        q0=_number('shells', 'q0', positive=True),
        i_min=_integer('shells', 'i_min'),
        i_max=_integer('shells', 'i_max'),
        eps_rel=_number('shells', 'eps_rel', positive=True, optional=True),
        dwell=_number('shells', 'dwell', positive=True, optional=True),
        R_sweep=_floats('shells', 'R_sweep'),
    )
    if not shells.i_min < 0 < shells.i_max:
        raise ConfigurationError(f'need shells.i_min < 0 < shells.i_max, got [{shells.i_min}, {shells.i_max}]')

    scenario = Scenario(
        name=str(_get('name')),
        mode=_choice('mode', options=MODES),
        dimension=_integer('dimension', minimum=1),
        particles=_integer('particles', minimum=1),
        seed=_integer('seed', minimum=0),
        r=r,
        R=radius,
        horizon=_number('horizon', positive=True),
        field=FieldSpec(
            label=label,
            gain=_number('field', 'gain'),
            declared_c0=_number('field', 'declared_c0', positive=True, optional=True),
        ),
        controls=controls,
        clp=clp,
        target=target,
        initial=initial,
        partition=partition,
        max_substep=_number('integrator', 'max_substep', positive=True),
        substeps=_integer('integrator', 'substeps', minimum=1, optional=True),
        feedback=feedback,
        selector=SelectorConfig(
            kappa_ratio=_number('selector', 'kappa_ratio', positive=True),
            kappa_steps=_integer('selector', 'kappa_steps', minimum=1),
            eps_ratio=_number('selector', 'eps_ratio', positive=True),
            eps_steps=_integer('selector', 'eps_steps', minimum=1),
            margin=_number('selector', 'margin'),
            headroom=_number('selector', 'headroom', positive=True),
            delta_min_ratio=_number('selector', 'delta_min_ratio', positive=True),
        ),
        shells=shells,
        tolerances=Tolerances(
            level=_number('tolerances', 'level'),
            bound=_number('tolerances', 'bound'),
            atom=_number('tolerances', 'atom'),
            ekeland=_number('tolerances', 'ekeland'),
        ),
        verify=VerifySpec(
            oracle_trials=_integer('verify', 'oracle_trials', minimum=0),
            metric_triples=_integer('verify', 'metric_triples', minimum=0),
            moreau_samples=_integer('verify', 'moreau_samples', minimum=0),
            moreau_kappas=_floats('verify', 'moreau_kappas'),
            ekeland_probes=_integer('verify', 'ekeland_probes', minimum=1),
            subgradient_instances=_integer('verify', 'subgradient_instances', minimum=0),
            subgradient_probes=_integer('verify', 'subgradient_probes', minimum=1),
            taylor_trials=_integer('verify', 'taylor_trials', minimum=0),
            taylor_taus=_floats('verify', 'taylor_taus'),
            lipschitz_trials=_integer('verify', 'lipschitz_trials', minimum=1),
            lemma_horizon=_number('verify', 'lemma_horizon', positive=True),
        ),
        snapshot_stride=_integer('output', 'snapshot_stride', minimum=0),
        schema_version=version,
        source=str(path),
    )
    logger.info(f'loaded scenario {scenario.name!r} ({scenario.mode}, hash {scenario.hash}) from {path}')
    return scenario


def with_axis(scenario: Scenario, axis: str, value: float) -> Scenario:
    """A copy of the scenario with one sweep axis (N, kappa, eps or delta) set"""
    if axis == 'N':
        if value < 1 or int(value) != value:
            raise ConfigurationError(f'particle count must be a positive integer, got {value}')
        return dataclasses.replace(scenario, particles=int(value))
    if axis == 'kappa':
        return dataclasses.replace(scenario, feedback=dataclasses.replace(scenario.feedback, kappa=float(value)))
    if axis == 'eps':
        return dataclasses.replace(scenario, feedback=dataclasses.replace(scenario.feedback, eps=float(value)))
    if axis == 'delta':
        partition = dataclasses.replace(
            scenario.partition, delta_max=float(value), delta_min=float(value) * 0.5
        )
        return dataclasses.replace(scenario, partition=partition)
    raise ConfigurationError(f'unknown sweep axis {axis!r}, supported: N, kappa, eps, delta')


SWEEP_AXES = ('N', 'kappa', 'eps', 'delta')


@dataclass(frozen=True)
class ScenarioContext:
    """The concrete objects a scenario describes"""

    scenario: Scenario
    target: EmpiricalMeasure
    initial: EmpiricalMeasure
    field: VectorField
    controls: ControlSet
    clp: ControlLyapunovPair
    sampler: MeasureSampler
    system: SystemConstants


def build_target(spec: MeasureSpec, dimension: int) -> EmpiricalMeasure:
    if spec.kind == 'file':
        target = read_measure_csv(spec.path)
    else:
        point = spec.point if spec.point is not None else (0.0,) * dimension
        target = EmpiricalMeasure(np.array([point], dtype=float))
    if target.dim != dimension:
        raise ConfigurationError(f'target is {target.dim}-d, scenario dimension is {dimension}')
    return target


def build_controls(spec: ControlSpec, dimension: int) -> ControlSet:
    if spec.kind == 'list':
        controls = ControlSet(np.array(spec.values, dtype=float))
    else:
        controls = ControlSet.lattice(dimension, spec.bound, spec.steps)
    if controls.dim != dimension:
        raise ConfigurationError(f'controls are {controls.dim}-d, scenario dimension is {dimension}')
    return controls


def load_plugin(reference: str) -> Any:
    module_name, _, attribute = reference.partition(':')
    try:
        module = importlib.import_module(module_name)
    except ImportError as err:
        raise ConfigurationError(f'cannot import Lyapunov plugin module {module_name!r}') from err
    factory = getattr(module, attribute, None)
    if not callable(factory):
        raise ConfigurationError(f'{reference} is not a callable Lyapunov pair factory')
    return factory


def build_clp(
    spec: ClpSpec, target: EmpiricalMeasure, controls: ControlSet, f: VectorField
) -> ControlLyapunovPair:
    if spec.kind == 'builtin':
        return builtin_quadratic_clp(target, controls, f, spec.eps0)
    pair = load_plugin(spec.plugin)(target=target, controls=controls, field=f, eps0=spec.eps0)
    if not isinstance(pair, ControlLyapunovPair):
        raise UnsupportedCLPError(f'{spec.plugin} returned {type(pair).__name__}, not a ControlLyapunovPair')
    return pair


def build_initial(spec: MeasureSpec, sampler: MeasureSampler, particles: int, dimension: int) -> EmpiricalMeasure:
    if spec.kind == 'file':
        initial = read_measure_csv(spec.path)
    elif spec.kind == 'sphere':
        initial = sampler.at_distance(spec.radius)
    else:
        initial = sampler.in_ball(spec.radius)
    if initial.n != particles or initial.dim != dimension:
        raise ConfigurationError(
            f'initial measure is {initial.n}x{initial.dim}, scenario asks for {particles}x{dimension}'
        )
    return initial


def build_context(scenario: Scenario) -> ScenarioContext:
    """Target, field, controls, pair, initial measure and the constants C0, C1 and sigma2(target)"""
    d = scenario.dimension
    target = build_target(scenario.target, d)
    f = make_field(scenario.field.label, scenario.field.declared_c0, scenario.field.gain)
    controls = build_controls(scenario.controls, d)
    clp = build_clp(scenario.clp, target, controls, f)

    sampler = MeasureSampler(target, scenario.particles, sub_seed(scenario.seed, 'sampler'))
    initial_sampler = MeasureSampler(target, scenario.particles, sub_seed(scenario.seed, 'initial'))
    initial = build_initial(scenario.initial, initial_sampler, scenario.particles, d)
    if scenario.clp.calibrate:
        calibration = MeasureSampler(target, scenario.particles, sub_seed(scenario.seed, 'calibration'))
        clp = calibrate_eps0(clp, f, controls, calibration, 0.5 * scenario.r, scenario.R)

    c0 = f.c0 if f.c0 is not None else estimate_lipschitz(f, sampler, controls, scenario.verify.lipschitz_trials)
    system = SystemConstants(
        c0=c0, c1=sublinear_bound(f, c0, controls, d), sigma2_target=second_moment_sqrt(target)
    )
    logger.info(f'C0={system.c0:.6g}, C1={system.c1:.6g}, sigma2(target)={system.sigma2_target:.6g}')
    return ScenarioContext(scenario, target, initial, f, controls, clp, sampler, system)
