"""
Control-Lyapunov pairs, the moduli S, I, Rcal and omega of a Lyapunov function, and the constants derived from them.
"""

import dataclasses
import math
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
from loguru import logger

from stab_flow.checks import PropertyResult
from stab_flow.dynamics import ControlSet, VectorField
from stab_flow.errors import BisectionError, ConfigurationError, DegenerateMeasureError, UnsupportedCLPError
from stab_flow.measures import EmpiricalMeasure, SubgradientMeasure
from stab_flow.sampling import MeasureSampler

# safety factors for sampled moduli
SUP_SAFETY = 1.1
INF_SAFETY = 0.9
EPS_FLOOR_RATIO = 1e-6

PhiFn = Callable[[EmpiricalMeasure], float]
GradFn = Callable[[EmpiricalMeasure], np.ndarray]
# psi(m, eps, eps0)
PsiFn = Callable[[EmpiricalMeasure, float, float], float]


@dataclass(frozen=True)
class ControlLyapunovPair:
    """
    phi with its per-particle gradient (the L2(m) representative), psi and the threshold eps0.
    psi receives the pair's current eps0 so that calibration can shrink it.
    """

    phi: PhiFn
    phi_grad: GradFn
    psi_fn: PsiFn
    eps0: float
    target: EmpiricalMeasure
    label: str = 'plugin'
    closed_form: bool = False

    def psi(self, m: EmpiricalMeasure, eps: float) -> float:
        return self.psi_fn(m, eps, self.eps0)

    def with_eps0(self, eps0: float) -> 'ControlLyapunovPair':
        return dataclasses.replace(self, eps0=eps0)


def builtin_quadratic_clp(
    target: EmpiricalMeasure,
    controls: ControlSet,
    field: VectorField,
    eps0: float = 1.0,
) -> ControlLyapunovPair:
    """
    phi = sigma2^2 / 2 about the origin, psi = phi (1 + eps / eps0). Covers linear_steer
    towards a single atom at the origin.
    """
    if target.n != 1 or np.any(target.points[0] != 0):
        raise UnsupportedCLPError('the built-in pair needs a single-atom target at the origin')
    if field.label != 'linear_steer' or field.params.get('gain', 1.0) <= 0:
        raise UnsupportedCLPError(f'the built-in pair covers linear_steer with positive gain, not {field.label}')
    if controls.dim != target.dim:
        raise UnsupportedCLPError(f'controls are {controls.dim}-d, target is {target.dim}-d')
    if not np.any(np.all(controls.controls == 0, axis=1)):
        logger.warning('control set has no zero control; the built-in pair may fail condition 4')

    def phi(m: EmpiricalMeasure) -> float:
        return 0.5 * float(np.mean(np.sum(m.points * m.points, axis=1)))

    def phi_grad(m: EmpiricalMeasure) -> np.ndarray:
        return m.points.copy()

    def psi(m: EmpiricalMeasure, eps: float, eps0_now: float) -> float:
        return phi(m) * (1 + eps / eps0_now)

    return ControlLyapunovPair(
        phi=phi, phi_grad=phi_grad, psi_fn=psi, eps0=eps0, target=target, label='quadratic', closed_form=True
    )


def gradient_lift(clp: ControlLyapunovPair, m: EmpiricalMeasure) -> SubgradientMeasure:
    """atoms (x_i, grad phi(m)_i, 1/N)"""
    return SubgradientMeasure(m.points, clp.phi_grad(m), np.full(m.n, 1 / m.n))


def shrunk_gradient_lift(clp: ControlLyapunovPair, m: EmpiricalMeasure, eps: float) -> SubgradientMeasure:
    """The gradient lift pulled back by eps along itself in L2(m), an eps-subgradient of phi at m"""
    grad = clp.phi_grad(m)
    norm = float(np.sqrt(np.mean(np.sum(grad * grad, axis=1))))
    scale = 1 - eps / norm if norm > 0 else 1.0
    return SubgradientMeasure(m.points, scale * grad, np.full(m.n, 1 / m.n))


@dataclass(frozen=True)
class ModuliTable:
    R: float
    S: float
    I: float  # noqa: E741
    Rcal: float
    eps: float
    closed_form: bool
    omega_fn: Callable[[float, float], float] = dataclasses.field(repr=False, compare=False)

    @property
    def M_e(self) -> float:  # noqa: N802
        return self.R + math.sqrt(2 * self.S + self.eps**2)

    def omega(self, delta: float, eps: float | None = None) -> float:
        """omega at scale delta on the ball of radius M^eps(R); eps defaults to the table's"""
        return self.omega_fn(delta, self.eps if eps is None else eps)

    def as_dict(self) -> dict:
        return {
            'R': self.R,
            'S': self.S,
            'I': self.I,
            'Rcal': self.Rcal,
            'M_e': self.M_e,
            'eps': self.eps,
            'closed_form': self.closed_form,
        }


def _sample_count(sampler: MeasureSampler | None, samples: int) -> int:
    if sampler is None:
        raise DegenerateMeasureError('a sampler is needed for a pair without closed-form moduli')
    if samples < 1:
        raise DegenerateMeasureError('no samples requested')
    return samples


def modulus_s(
    clp: ControlLyapunovPair, radius: float, sampler: MeasureSampler | None = None, samples: int = 256
) -> float:
    """sup of phi over B_radius(target)"""
    if clp.closed_form:
        return radius**2 / 2
    count = _sample_count(sampler, samples)
    estimate = max(clp.phi(sampler.in_ball(radius)) for _ in range(count))
    logger.debug(f'S({radius}) sampled as {estimate} (a lower estimate), inflated by {SUP_SAFETY}')
    return SUP_SAFETY * estimate


def modulus_i(
    clp: ControlLyapunovPair, radius: float, sampler: MeasureSampler | None = None, samples: int = 256
) -> float:
    """inf of phi outside the open ball O_radius(target)"""
    if clp.closed_form:
        return radius**2 / 2
    count = _sample_count(sampler, samples)
    estimate = min(clp.phi(sampler.outside_ball(radius, spread=1.5)) for _ in range(count))
    estimate = min(estimate, *(clp.phi(sampler.on_sphere(radius)) for _ in range(count)))
    logger.debug(f'I({radius}) sampled as {estimate} (an upper estimate), deflated by {INF_SAFETY}')
    return INF_SAFETY * estimate


def radius_rcal(
    clp: ControlLyapunovPair,
    radius: float,
    sampler: MeasureSampler | None = None,
    samples: int = 128,
    i_value: float | None = None,
) -> float:
    """Largest r with sup over B_r(target) of phi at most I(radius)/2"""
    if radius <= 0:
        raise BisectionError(f'Rcal needs a positive radius, got {radius}')
    if clp.closed_form:
        return radius / math.sqrt(2)
    count = _sample_count(sampler, samples)
    level = 0.5 * (i_value if i_value is not None else modulus_i(clp, radius, sampler))
    # one direction bank for every trial radius keeps the sampled sup a fixed function of r
    bank = [(sampler.direction(), sampler.rng.uniform()) for _ in range(count)]

    def sup_at(r: float) -> float:
        values = [clp.phi(sampler.at_distance(r, d)) for d, _ in bank]
        values += [clp.phi(sampler.at_distance(r * s, d)) for d, s in bank]
        return SUP_SAFETY * max(values)

    lo, hi = 0.0, radius
    if sup_at(hi) <= level:
        raise BisectionError(f'sup of phi on B_{radius} stays below I/2; Rcal is not bracketed')
    for _ in range(50):
        mid = 0.5 * (lo + hi)
        if sup_at(mid) <= level:
            lo = mid
        else:
            hi = mid
    if lo <= 0:
        raise BisectionError(f'no positive radius found inside the level set of R={radius}')
    return lo


def omega_modulus(
    clp: ControlLyapunovPair,
    radius: float,
    eps: float,
    delta: float,
    sampler: MeasureSampler | None = None,
    samples: int = 128,
    s_value: float | None = None,
) -> float:
    """
    Modulus of continuity of phi on B_{M^eps(radius)}(target) at scale delta. For the quadratic
    pair this is the Lipschitz-on-ball bound delta M + delta^2 / 2.
    """
    if delta <= 0:
        return 0.0
    s_value = s_value if s_value is not None else modulus_s(clp, radius, sampler)
    big = radius + math.sqrt(2 * s_value + eps**2)
    if clp.closed_form:
        return delta * big + delta**2 / 2
    count = _sample_count(sampler, samples)
    worst = 0.0
    for _ in range(count):
        first, second = sampler.close_pair(big, delta)
        worst = max(worst, abs(clp.phi(first) - clp.phi(second)))
    return SUP_SAFETY * worst


def moduli_table(
    clp: ControlLyapunovPair,
    radius: float,
    eps: float,
    sampler: MeasureSampler | None = None,
    samples: int = 128,
) -> ModuliTable:
    s_value = modulus_s(clp, radius, sampler, samples)
    i_value = modulus_i(clp, radius, sampler, samples)
    rcal = radius_rcal(clp, radius, sampler, samples, i_value=i_value)
    if clp.closed_form:

        def omega_fn(delta: float, eps_now: float) -> float:
            return omega_modulus(clp, radius, eps_now, delta, s_value=s_value)

    else:
        cache: dict[tuple[float, float], float] = {}

        def omega_fn(delta: float, eps_now: float) -> float:
            if (delta, eps_now) not in cache:
                cache[delta, eps_now] = omega_modulus(clp, radius, eps_now, delta, sampler, samples, s_value=s_value)
            return cache[delta, eps_now]

    return ModuliTable(
        R=radius, S=s_value, I=i_value, Rcal=rcal, eps=eps, closed_form=clp.closed_form, omega_fn=omega_fn
    )


@dataclass(frozen=True)
class DerivedConstants:
    M_ke: float
    M_e: float
    N_ke: float
    K_ke: float
    Delta: float
    omega_at_M: float
    kappa: float
    eps: float
    r: float
    R: float

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def delta_annulus(
    clp: ControlLyapunovPair,
    rcal_r: float,
    outer: float,
    sampler: MeasureSampler | None = None,
    samples: int = 128,
) -> float:
    """
    A third of the infimum of psi(., eps_floor) over the annulus Rcal(r)/2 <= W2(target, mu) <= outer.
    The outer radius is taken as M^eps(R).
    """
    inner = 0.5 * rcal_r
    eps_floor = EPS_FLOOR_RATIO * clp.eps0
    if clp.closed_form:
        return (0.5 * inner**2) * (1 + eps_floor / clp.eps0) / 3
    count = _sample_count(sampler, samples)
    values = [clp.psi(sampler.on_sphere(inner), eps_floor) for _ in range(count)]
    values += [clp.psi(sampler.annulus(inner, outer), eps_floor) for _ in range(count)]
    return INF_SAFETY * min(values) / 3


def derived_constants(
    clp: ControlLyapunovPair,
    moduli: ModuliTable,
    kappa: float,
    eps: float,
    r: float,
    radius: float,
    rcal_r: float | None = None,
    sampler: MeasureSampler | None = None,
    delta: float | None = None,
) -> DerivedConstants:
    """
    M_ke, M_e, N_ke, K_ke and Delta(r, R). N uses the uniform bound S(R) in place of phi_kappa(m).
    A precomputed Delta can be passed in since it does not depend on kappa.
    """
    if not 0 < kappa <= 1:
        raise ConfigurationError(f'kappa must lie in (0, 1], got {kappa}')
    if eps < 0:
        raise ConfigurationError(f'eps must be nonnegative, got {eps}')
    if not 0 < r < radius:
        raise ConfigurationError(f'need 0 < r < R, got r={r}, R={radius}')
    if moduli.R != radius:
        raise ConfigurationError(f'moduli were computed for R={moduli.R}, not {radius}')

    s_value = moduli.S
    m_ke = kappa * math.sqrt(2 * s_value + eps**2 * kappa**2) - eps * kappa**2
    m_e = radius + math.sqrt(2 * s_value + eps**2)
    n_ke = eps * math.sqrt(2 * kappa**2 * s_value) + eps * m_ke
    omega_at_m = moduli.omega(m_ke, eps)
    k_ke = eps * kappa**2 + kappa * math.sqrt(eps**2 * kappa**2 + 2 * omega_at_m)
    if delta is None:
        if rcal_r is None:
            rcal_r = radius_rcal(clp, r, sampler)
        delta = delta_annulus(clp, rcal_r, m_e, sampler)
    return DerivedConstants(
        M_ke=m_ke,
        M_e=m_e,
        N_ke=n_ke,
        K_ke=k_ke,
        Delta=delta,
        omega_at_M=omega_at_m,
        kappa=kappa,
        eps=eps,
        r=r,
        R=radius,
    )


def level_set_inclusion_holds(moduli: ModuliTable, constants: DerivedConstants) -> bool:
    """Sufficient condition for the kappa-level set of I(R)/2 to sit inside O_R(target)"""
    return constants.omega_at_M + constants.N_ke < 0.5 * moduli.I


def pairing(alpha: SubgradientMeasure, f: VectorField, m: EmpiricalMeasure, u: np.ndarray) -> float:
    """integral of p . f(x, m, u) against alpha"""
    velocities = f.fn(alpha.positions, m.points, np.asarray(u, dtype=float))
    return float(np.sum(alpha.masses * np.sum(alpha.covectors * velocities, axis=1)))


def clp_condition4_check(
    clp: ControlLyapunovPair,
    f: VectorField,
    controls: ControlSet,
    m: EmpiricalMeasure,
    eps: float,
    alphas: list[SubgradientMeasure],
) -> PropertyResult:
    """min over U of the pairing must not exceed -psi(m, eps) for any of the given subgradients"""
    if len(controls) == 0:
        raise ConfigurationError('condition 4 needs a nonempty control set')
    bound = -clp.psi(m, eps)
    margins = []
    best_controls = []
    for alpha in alphas:
        values = [pairing(alpha, f, m, u) for u in controls.controls]
        best = int(np.argmin(values))
        best_controls.append(best)
        margins.append(bound - values[best])
    return PropertyResult.from_margins('clp_condition4', margins, tolerance=0.0, controls=best_controls)


def calibrate_eps0(
    clp: ControlLyapunovPair,
    f: VectorField,
    controls: ControlSet,
    sampler: MeasureSampler,
    inner: float,
    outer: float,
    trials: int = 32,
    max_halvings: int = 30,
) -> ControlLyapunovPair:
    """
    Halve eps0 until condition 4 holds at eps = eps0 / 2 on annulus samples, for both the exact
    gradient lift and the lift shrunk by eps. For the built-in pair psi(m, eps0 / 2)
    does not move with eps0, so only the shrunk lift reacts to it.
    """
    calibration = [sampler.annulus(inner, outer) for _ in range(trials)]
    current = clp
    for halving in range(max_halvings + 1):
        eps = current.eps0 / 2
        results = [
            clp_condition4_check(
                current, f, controls, m, eps, [gradient_lift(current, m), shrunk_gradient_lift(current, m, eps)]
            )
            for m in calibration
        ]
        if all(result.passed for result in results):
            if halving:
                logger.info(f'eps0 calibrated down to {current.eps0} after {halving} halvings')
            return current
        current = current.with_eps0(current.eps0 / 2)
    raise UnsupportedCLPError(f'condition 4 still fails after halving eps0 {max_halvings} times')


def clp_invariants(
    clp: ControlLyapunovPair,
    sampler: MeasureSampler,
    radius: float,
    trials: int = 64,
) -> list[PropertyResult]:
    """phi(target) = 0, phi and psi positive off the target, psi monotone in eps"""
    target_value = clp.phi(clp.target)
    base = sampler.at_distance(0.0)
    samples = [m for m in (sampler.in_ball(radius) for _ in range(trials)) if not m.same_support(base)]
    grid = [0.01 * clp.eps0, 0.1 * clp.eps0, clp.eps0]
    monotone = []
    for m in samples:
        values = [clp.psi(m, eps) for eps in grid]
        monotone.append(all(b >= a for a, b in zip(values, values[1:], strict=False)))
    return [
        PropertyResult.from_margins('phi_zero_at_target', [-abs(target_value)], tolerance=1e-12),
        PropertyResult.from_flags('phi_positive_off_target', [clp.phi(m) > 0 for m in samples]),
        PropertyResult.from_flags('psi_positive_off_target', [clp.psi(m, grid[0]) > 0 for m in samples]),
        PropertyResult.from_flags('psi_monotone_in_eps', monotone),
    ]
