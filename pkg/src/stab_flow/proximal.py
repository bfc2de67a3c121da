"""
Wasserstein inf-convolution of a Lyapunov function, certified by Ekeland's two inequalities,
and the proximal subgradient pushed forward from its plan.
"""

import math
from dataclasses import dataclass

import numpy as np
from loguru import logger

from stab_flow.errors import ConfigurationError, DimensionMismatchError, NonConvergenceError, StabError
from stab_flow.lyapunov import ControlLyapunovPair, derived_constants, moduli_table
from stab_flow.measures import (
    EmpiricalMeasure,
    SubgradientMeasure,
    TransportPlan,
    disintegrate_plan,
    identity_plan,
    optimal_plan,
    w2_squared,
)
from stab_flow.sampling import MeasureSampler

SEGMENT_POINTS = 15
PROBE_SCALES = ('kappa2', 'kappa', 'unit')


@dataclass(frozen=True)
class InfConvOptions:
    repair_every: int = 25
    max_iter: int = 10_000
    probes: int = 64
    seed: int = 0
    armijo: float = 1e-4
    shrink: float = 0.5
    retry_halving: bool = True
    tolerance: float = 1e-9


@dataclass(frozen=True)
class InfConvResult:
    value: float
    minimizer: EmpiricalMeasure
    plan: TransportPlan
    source: EmpiricalMeasure
    eps_used: float
    iterations: int
    ekeland_ok: bool
    ekeland_margin: float

    @property
    def distance(self) -> float:
        """W2(m, minimizer)"""
        return math.sqrt(max(self.plan.squared_cost(self.source, self.minimizer), 0.0))


@dataclass(frozen=True)
class EkelandVerdict:
    ok: bool
    worst_margin: float
    condition1_margin: float
    failing_probe: EmpiricalMeasure | None = None
    failing_kind: str | None = None


def coupled_value(clp: ControlLyapunovPair, kappa: float, m: EmpiricalMeasure, mu: EmpiricalMeasure) -> float:
    """phi(mu) + W2^2(m, mu) / (2 kappa^2)"""
    return clp.phi(mu) + w2_squared(m, mu) / (2 * kappa**2)


def build_probes(
    m: EmpiricalMeasure,
    candidate: EmpiricalMeasure,
    kappa: float,
    count: int,
    rng: np.random.Generator,
) -> list[tuple[str, EmpiricalMeasure]]:
    """
    m itself, points on the particle-wise segment from the candidate to m, and random
    perturbations of the candidate at scales kappa^2, kappa and 1.
    """
    probes = [('source', m)]
    if candidate.n == m.n:
        segment = min(SEGMENT_POINTS, max(count // 4, 1))
        for j in range(1, segment + 1):
            t = j / (segment + 1)
            probes.append(('segment', EmpiricalMeasure(candidate.points + t * (m.points - candidate.points))))
    scales = {'kappa2': kappa**2, 'kappa': kappa, 'unit': 1.0}
    for k in range(max(count - len(probes), 0)):
        kind = PROBE_SCALES[k % len(PROBE_SCALES)]
        noise = rng.standard_normal(candidate.points.shape)
        noise /= max(math.sqrt(np.mean(np.sum(noise * noise, axis=1))), 1e-300)
        probes.append((kind, EmpiricalMeasure(candidate.points + scales[kind] * rng.uniform(0.05, 1.0) * noise)))
    return probes


def ekeland_verify(
    clp: ControlLyapunovPair,
    kappa: float,
    eps: float,
    m: EmpiricalMeasure,
    candidate: EmpiricalMeasure,
    probes: list[EmpiricalMeasure] | list[tuple[str, EmpiricalMeasure]],
    tolerance: float = 1e-9,
) -> EkelandVerdict:
    """
    (1) F(candidate) <= phi(m), and (2) F(candidate) <= F(mu) + eps W2(candidate, mu) for
    every probe mu, where F(mu) = phi(mu) + W2^2(m, mu) / (2 kappa^2).
    """
    if not probes:
        raise ConfigurationError('Ekeland verification needs at least one probe')
    labelled = [p if isinstance(p, tuple) else ('probe', p) for p in probes]
    own = coupled_value(clp, kappa, m, candidate)
    condition1 = clp.phi(m) - own
    worst = condition1
    if condition1 < -tolerance:
        return EkelandVerdict(False, condition1, condition1, m, 'source')

    for kind, mu in labelled:
        margin = coupled_value(clp, kappa, m, mu) + eps * math.sqrt(w2_squared(candidate, mu)) - own
        if margin < worst:
            worst = margin
        if margin < -tolerance:
            return EkelandVerdict(False, margin, condition1, mu, kind)
    return EkelandVerdict(True, worst, condition1)


def _paired_displacement(m: EmpiricalMeasure, mu: EmpiricalMeasure) -> np.ndarray:
    perm = optimal_plan(m, mu).permutation()
    return mu.points[perm] - m.points


def inf_convolution(
    clp: ControlLyapunovPair,
    kappa: float,
    eps: float,
    m: EmpiricalMeasure,
    opts: InfConvOptions | None = None,
    warm_start: EmpiricalMeasure | None = None,
) -> InfConvResult:
    """
    phi_kappa(m) = inf over mu of phi(mu) + W2^2(m, mu) / (2 kappa^2), with mu restricted to
    N particles paired to those of m. The returned minimizer is an Ekeland eps-point.
    On non-convergence eps is halved once before giving up.
    """
    if not 0 < kappa <= 1:
        raise ConfigurationError(f'kappa must lie in (0, 1], got {kappa}')
    if eps <= 0:
        raise ConfigurationError(f'eps must be positive, got {eps}')
    if m.dim != clp.target.dim:
        raise DimensionMismatchError(f'measure is {m.dim}-d, Lyapunov pair is {clp.target.dim}-d')
    opts = opts or InfConvOptions()
    try:
        return _descend(clp, kappa, eps, m, opts, warm_start)
    except NonConvergenceError:
        if not opts.retry_halving:
            raise
        logger.warning(f'inf-convolution did not converge at eps={eps}; retrying once at eps={eps / 2}')
        return _descend(clp, kappa, eps / 2, m, opts, warm_start)


def _descend(
    clp: ControlLyapunovPair,
    kappa: float,
    eps: float,
    m: EmpiricalMeasure,
    opts: InfConvOptions,
    warm_start: EmpiricalMeasure | None,
) -> InfConvResult:
    x = m.points
    k2 = kappa**2
    rng = np.random.default_rng(opts.seed)

    def objective(d: np.ndarray) -> float:
        return clp.phi(EmpiricalMeasure(x + d)) + float(np.mean(np.sum(d * d, axis=1))) / (2 * k2)

    d = np.zeros_like(x)
    if warm_start is not None and warm_start.n == m.n:
        d_warm = _paired_displacement(m, warm_start)
        # a warm start only helps if it already beats staying put
        if objective(d_warm) <= objective(d):
            d = d_warm

    value = objective(d)
    best_d, best_value = d, value
    for iteration in range(1, opts.max_iter + 1):
        mu = EmpiricalMeasure(x + d)
        g = clp.phi_grad(mu) + d / k2
        g_norm = math.sqrt(float(np.mean(np.sum(g * g, axis=1))))

        if iteration % opts.repair_every == 0 or g_norm <= eps / 2:
            repaired = _paired_displacement(m, mu)
            old_cost = float(np.mean(np.sum(d * d, axis=1)))
            new_cost = float(np.mean(np.sum(repaired * repaired, axis=1)))
            if new_cost < old_cost - 1e-12 * max(old_cost, 1.0):
                d, value = repaired, objective(repaired)
                continue

        if g_norm <= eps / 2:
            result = _try_accept(clp, kappa, eps, m, mu, value, iteration, opts, rng)
            if isinstance(result, InfConvResult):
                return result
            # adopt the probe that beat the candidate and keep descending
            d, value = _paired_displacement(m, result), coupled_value(clp, kappa, m, result)
            continue

        step = k2
        trial = d - step * g
        trial_value = objective(trial)
        while trial_value > value - opts.armijo * step * g_norm**2:
            step *= opts.shrink
            if step < 1e-16 * k2:
                break
            trial = d - step * g
            trial_value = objective(trial)
        if trial_value >= value:
            # line search stalled below the gradient tolerance's resolution
            result = _try_accept(clp, kappa, eps, m, mu, value, iteration, opts, rng)
            if isinstance(result, InfConvResult):
                return result
            d, value = _paired_displacement(m, result), coupled_value(clp, kappa, m, result)
            continue
        d, value = trial, trial_value
        if value < best_value:
            best_d, best_value = d, value
        logger.debug(f'inf-convolution iteration {iteration}: F={value:.12g}, |g|={g_norm:.3g}')

    best = EmpiricalMeasure(x + best_d)
    raise NonConvergenceError(
        f'inf-convolution hit {opts.max_iter} iterations without an Ekeland point (kappa={kappa}, eps={eps})',
        best=best,
    )


def _try_accept(
    clp: ControlLyapunovPair,
    kappa: float,
    eps: float,
    m: EmpiricalMeasure,
    candidate: EmpiricalMeasure,
    value: float,
    iteration: int,
    opts: InfConvOptions,
    rng: np.random.Generator,
) -> InfConvResult | EmpiricalMeasure:
    """The accepted result, or the probe measure to continue from"""
    probes = build_probes(m, candidate, kappa, opts.probes, rng)
    verdict = ekeland_verify(clp, kappa, eps, m, candidate, probes, opts.tolerance)
    if verdict.ok:
        plan = optimal_plan(m, candidate)
        exact = coupled_value(clp, kappa, m, candidate)
        return InfConvResult(
            value=min(exact, value),
            minimizer=candidate,
            plan=plan,
            source=m,
            eps_used=eps,
            iterations=iteration,
            ekeland_ok=True,
            ekeland_margin=verdict.worst_margin,
        )
    if verdict.failing_kind == 'source':
        # staying at m is the other admissible Ekeland point
        fallback = ekeland_verify(clp, kappa, eps, m, m, build_probes(m, m, kappa, opts.probes, rng), opts.tolerance)
        if fallback.ok:
            return InfConvResult(
                value=clp.phi(m),
                minimizer=m,
                plan=identity_plan(m.n),
                source=m,
                eps_used=eps,
                iterations=iteration,
                ekeland_ok=True,
                ekeland_margin=fallback.worst_margin,
            )
        return fallback.failing_probe
    logger.debug(f'Ekeland check failed on a {verdict.failing_kind} probe (margin {verdict.worst_margin:.3g})')
    return verdict.failing_probe


def gamma_subgradient(result: InfConvResult, kappa: float) -> SubgradientMeasure:
    """Atoms (y, (x - y) / kappa^2, mass) for each pair (x, y) of the inf-convolution plan"""
    if not result.plan.is_permutation:
        raise StabError('the subgradient construction needs a one-to-one inf-convolution plan')
    x = result.source.points[result.plan.sources]
    y = result.minimizer.points[result.plan.targets]
    return SubgradientMeasure(positions=y, covectors=(x - y) / kappa**2, masses=result.plan.masses)


@dataclass(frozen=True)
class SubgradientReport:
    ok: bool
    worst_margin: float
    probes_used: int
    couplings_tested: int


def _position_classes(m0: EmpiricalMeasure, alpha: SubgradientMeasure) -> TransportPlan:
    """
    alpha written as a plan from m0's particle indices (first index of each duplicate class)
    to alpha's atoms; fails if alpha's position marginal is not m0.
    """
    _, inverse, counts = np.unique(m0.points, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    first_index = {int(c): int(np.flatnonzero(inverse == c)[0]) for c in np.unique(inverse)}
    # adding 0.0 folds -0.0 into 0.0 so byte keys agree with np.unique
    lookup = {(m0.points[i] + 0.0).tobytes(): cls for cls, i in first_index.items()}
    class_mass = np.zeros(counts.size)
    sources = []
    for position, mass in zip(alpha.positions, alpha.masses, strict=True):
        cls = lookup.get((np.asarray(position, dtype=float) + 0.0).tobytes())
        if cls is None:
            raise DimensionMismatchError(f'subgradient atom at {position.tolist()} is not a base particle')
        class_mass[cls] += mass
        sources.append(first_index[cls])
    if np.max(np.abs(class_mass - counts / m0.n)) > 1e-12:
        raise DimensionMismatchError('position marginal of the subgradient does not match the base measure')
    return TransportPlan(np.array(sources), np.arange(alpha.masses.size), alpha.masses, m0.n, alpha.masses.size)


def proximal_subgradient_verify(
    clp: ControlLyapunovPair,
    m0: EmpiricalMeasure,
    alpha: SubgradientMeasure,
    eps: float,
    sigma: float,
    radius: float,
    probes: list[EmpiricalMeasure],
    tolerance: float = 1e-9,
) -> SubgradientReport:
    """
    phi(mu) >= phi(m0) + int p.(x2 - x1) dbeta - sigma int |x2 - x1|^2 - eps W2(m0, mu) for each
    probe mu in B_radius(m0) and each lifted coupling beta (optimal, plus index pairing for equal N).
    """
    lifted = _position_classes(m0, alpha)
    conditionals = disintegrate_plan(lifted, 1)
    # the pairing is linear in p, so only the conditional mean covector matters
    mean_covector = {
        key: sum(weight * alpha.covectors[atom] for atom, weight in cond.items()) for key, cond in conditionals.items()
    }
    _, inverse = np.unique(m0.points, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    representative = {int(c): int(np.flatnonzero(inverse == c)[0]) for c in np.unique(inverse)}
    covector_of = np.stack([mean_covector[representative[int(c)]] for c in inverse])

    phi0 = clp.phi(m0)
    worst = math.inf
    used = 0
    tested = 0
    for mu in probes:
        if mu.dim != m0.dim:
            raise DimensionMismatchError('probe dimension differs from the base measure')
        w2sq = w2_squared(m0, mu)
        if math.sqrt(w2sq) > radius * (1 + 1e-12):
            continue
        used += 1
        couplings = [optimal_plan(m0, mu)]
        if mu.n == m0.n:
            couplings.append(identity_plan(m0.n))
        phi_mu = clp.phi(mu)
        for plan in couplings:
            tested += 1
            jump = mu.points[plan.targets] - m0.points[plan.sources]
            linear = float(np.sum(plan.masses * np.sum(covector_of[plan.sources] * jump, axis=1)))
            quadratic = float(np.sum(plan.masses * np.sum(jump * jump, axis=1)))
            margin = phi_mu - (phi0 + linear - sigma * quadratic - eps * math.sqrt(w2sq))
            worst = min(worst, margin)
    return SubgradientReport(
        ok=used > 0 and worst >= -tolerance, worst_margin=worst, probes_used=used, couplings_tested=tested
    )


def ball_probes(m0: EmpiricalMeasure, radius: float, count: int, rng: np.random.Generator) -> list[EmpiricalMeasure]:
    """m0 itself, dilations of m0 about the origin and random perturbations, all within B_radius(m0)"""
    probes = [m0]
    scale = math.sqrt(float(np.mean(np.sum(m0.points**2, axis=1))))
    for k in range(count - 1):
        if k % 3 == 0 and scale > 0:
            t = rng.uniform(-1.0, 1.0) * radius / scale
            probes.append(EmpiricalMeasure((1 + t) * m0.points))
            continue
        noise = rng.standard_normal(m0.points.shape)
        noise /= max(math.sqrt(float(np.mean(np.sum(noise * noise, axis=1)))), 1e-300)
        probes.append(EmpiricalMeasure(m0.points + radius * rng.uniform(0.01, 1.0) * noise))
    return probes


@dataclass(frozen=True)
class TaylorVerdict:
    ok: bool
    slack: float
    lhs: float
    rhs: float


def taylor_bound_verify(
    clp: ControlLyapunovPair,
    kappa: float,
    eps: float,
    m: EmpiricalMeasure,
    b: np.ndarray,
    tau: float,
    radius: float,
    opts: InfConvOptions | None = None,
    sampler: MeasureSampler | None = None,
    base: InfConvResult | None = None,
    tolerance: float = 1e-9,
) -> TaylorVerdict:
    """
    phi_kappa((Id + tau b)#m) <= phi_kappa(m) + int ((x - y) / kappa^2) . tau b(x) dpi
    + tau^2 |b|^2 / (2 kappa^2) + N(R)
    """
    b = np.asarray(b, dtype=float)
    if b.shape != m.points.shape:
        raise DimensionMismatchError(f'field of shape {b.shape} does not match measure {m.points.shape}')
    if tau <= 0:
        raise ConfigurationError(f'tau must be positive, got {tau}')
    base = base or inf_convolution(clp, kappa, eps, m, opts)
    table = moduli_table(clp, radius, base.eps_used, sampler)
    constants = derived_constants(clp, table, kappa, base.eps_used, 0.5 * radius, radius, delta=0.0)

    x = base.source.points[base.plan.sources]
    y = base.minimizer.points[base.plan.targets]
    covectors = (x - y) / kappa**2
    first_order = float(np.sum(base.plan.masses * np.sum(covectors * tau * b[base.plan.sources], axis=1)))
    b_norm2 = float(np.mean(np.sum(b * b, axis=1)))
    rhs = base.value + first_order + tau**2 * b_norm2 / (2 * kappa**2) + constants.N_ke

    moved = EmpiricalMeasure(m.points + tau * b)
    # shifted minimizer as a warm start for the moved measure
    warm = EmpiricalMeasure(y + tau * b[base.plan.sources])
    lhs = inf_convolution(clp, kappa, eps, moved, opts, warm_start=warm).value
    return TaylorVerdict(ok=lhs <= rhs + tolerance, slack=rhs - lhs, lhs=lhs, rhs=rhs)
