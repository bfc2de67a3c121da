"""
Randomised property suites behind `stab verify`. Each suite returns PropertyResults; a failing
property is reported, never raised.
"""

import itertools
import math

import numpy as np
from loguru import logger

from stab_flow.checks import PropertyResult
from stab_flow.dynamics import c3_constant, drift_difference_norm, sampled_lipschitz_ratio
from stab_flow.lyapunov import clp_condition4_check, clp_invariants, gradient_lift, level_set_inclusion_holds
from stab_flow.measures import (
    EmpiricalMeasure,
    SubgradientMeasure,
    disintegrate_plan,
    optimal_plan,
    plan_marginal,
    recombine_disintegration,
    w2_distance,
    w2_squared,
)
from stab_flow.proximal import (
    InfConvOptions,
    ball_probes,
    build_probes,
    ekeland_verify,
    gamma_subgradient,
    inf_convolution,
    proximal_subgradient_verify,
    taylor_bound_verify,
)
from stab_flow.scenario import ScenarioContext
from stab_flow.stabilize import (
    OperatingPoint,
    ParameterSelection,
    TrajectoryOptions,
    local_feedback,
    make_partition,
    run_theta_trajectory,
)
from stab_flow.verdicts import bound_margin_checks, knot_decrease_check

SUITES = ('transport', 'proximal', 'lemmas')


def brute_force_w2_squared(a: np.ndarray, b: np.ndarray) -> float:
    """Minimum over all permutations of the mean squared displacement"""
    n = a.shape[0]
    best = math.inf
    for perm in itertools.permutations(range(n)):
        diff = a - b[list(perm)]
        best = min(best, float(np.mean(np.sum(diff * diff, axis=1))))
    return best


def transport_suite(ctx: ScenarioContext, rng: np.random.Generator) -> list[PropertyResult]:
    spec = ctx.scenario.verify
    oracle = []
    for _ in range(spec.oracle_trials):
        n, d = int(rng.integers(1, 7)), int(rng.integers(1, 4))
        a, b = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        oracle.append(-abs(w2_squared(EmpiricalMeasure(a), EmpiricalMeasure(b)) - brute_force_w2_squared(a, b)))

    symmetric, triangle = [], []
    for _ in range(spec.metric_triples):
        a, b, c = (EmpiricalMeasure(rng.normal(size=(20, 2))) for _ in range(3))
        symmetric.append(w2_distance(a, b) == w2_distance(b, a))
        triangle.append(w2_distance(a, b) + w2_distance(b, c) - w2_distance(a, c))

    marginals, round_trip = [], []
    for _ in range(max(spec.oracle_trials // 5, 1)):
        n, k = int(rng.integers(2, 8)), int(rng.integers(2, 8))
        plan = optimal_plan(EmpiricalMeasure(rng.normal(size=(n, 2))), EmpiricalMeasure(rng.normal(size=(k, 2))))
        marginals.append(-plan.marginal_error())
        for variable in (1, 2):
            rebuilt = recombine_disintegration(
                disintegrate_plan(plan, variable), plan_marginal(plan, variable), variable, n, k
            )
            round_trip.append(sorted(rebuilt.pairs) == sorted(plan.pairs) or _close_pairs(rebuilt.pairs, plan.pairs))

    return [
        PropertyResult.from_margins('w2_permutation_oracle', oracle, tolerance=1e-9),
        PropertyResult.from_flags('w2_symmetry', symmetric),
        PropertyResult.from_margins('w2_triangle', triangle, tolerance=1e-9),
        PropertyResult.from_margins('plan_marginals', marginals, tolerance=1e-12),
        PropertyResult.from_flags('disintegration_round_trip', round_trip),
    ]


def _close_pairs(first: list, second: list) -> bool:
    a, b = sorted(first), sorted(second)
    return len(a) == len(b) and all(
        (i, j) == (k, l) and abs(x - y) <= 1e-12 for (i, j, x), (k, l, y) in zip(a, b, strict=True)
    )


def proximal_suite(ctx: ScenarioContext, point: OperatingPoint, rng: np.random.Generator) -> list[PropertyResult]:
    """
    Closed-form Moreau values (built-in pair only), Ekeland acceptance, the W2 and value bounds
    of accepted minimizers, the canonical subgradient certificate and the first-order bound.
    """
    scenario, clp, sampler = ctx.scenario, ctx.clp, ctx.sampler
    spec = scenario.verify
    tol = scenario.tolerances.ekeland
    opts = InfConvOptions(probes=spec.ekeland_probes, seed=int(rng.integers(2**31)))
    radius = scenario.R
    kappa, eps = point.kappa, point.eps
    constants = point.constants

    results = []
    if clp.closed_form:
        value_errors, point_errors = [], []
        for kappa_now in spec.moreau_kappas:
            for _ in range(spec.moreau_samples):
                m = EmpiricalMeasure(rng.normal(size=(50, ctx.scenario.dimension)))
                result = inf_convolution(clp, kappa_now, 1e-6, m, opts)
                exact = clp.phi(m) / (1 + kappa_now**2)
                value_errors.append(-abs(result.value - exact) / max(exact, 1e-300))
                expected = m.points[result.plan.sources] / (1 + kappa_now**2)
                found = result.minimizer.points[result.plan.targets]
                point_errors.append(-float(np.max(np.linalg.norm(found - expected, axis=1))))
        results += [
            PropertyResult.from_margins('moreau_value', value_errors, tolerance=1e-4),
            PropertyResult.from_margins('moreau_minimizer', point_errors, tolerance=1e-3),
        ]

    accepted, distance, anchor, coupled, gap, certificates, negatives, taylor = [], [], [], [], [], [], [], []
    omega_gap = constants.omega_at_M + constants.N_ke
    for _ in range(spec.subgradient_instances):
        m = sampler.in_ball(radius)
        result = inf_convolution(clp, kappa, eps, m, opts)
        probes = build_probes(m, result.minimizer, kappa, spec.ekeland_probes, rng)
        verdict = ekeland_verify(clp, kappa, result.eps_used, m, result.minimizer, probes, tol)
        accepted.append(verdict.ok)
        distance.append(constants.M_ke - result.distance)
        anchor.append(constants.M_e - w2_distance(clp.target, result.minimizer))
        own = clp.phi(result.minimizer) + result.distance**2 / (2 * kappa**2)
        coupled.append(result.value + constants.N_ke - own)
        gap.append(omega_gap - (clp.phi(m) - result.value))

        alpha = gamma_subgradient(result, kappa)
        sigma = 1 / (2 * kappa**2)
        ball = ball_probes(result.minimizer, radius, spec.subgradient_probes, rng)
        report = proximal_subgradient_verify(clp, result.minimizer, alpha, result.eps_used, sigma, radius, ball, tol)
        certificates.append(report.worst_margin)
        doubled = SubgradientMeasure(alpha.positions, 2 * alpha.covectors, alpha.masses)
        broken = proximal_subgradient_verify(clp, result.minimizer, doubled, result.eps_used, sigma, radius, ball, tol)
        negatives.append(not broken.ok)

    for trial in range(spec.taylor_trials):
        m = sampler.in_ball(radius)
        tau = spec.taylor_taus[trial % len(spec.taylor_taus)]
        b = rng.normal(size=m.points.shape)
        taylor.append(taylor_bound_verify(clp, kappa, eps, m, b, tau, radius, opts, sampler, tolerance=tol).slack)

    results += [
        PropertyResult.from_flags('ekeland_acceptance', accepted),
        PropertyResult.from_margins('minimizer_distance', distance, tolerance=tol, bound=constants.M_ke),
        PropertyResult.from_margins('minimizer_anchor', anchor, tolerance=tol, bound=constants.M_e),
        PropertyResult.from_margins('coupled_value_bound', coupled, tolerance=tol),
        PropertyResult.from_margins('envelope_gap', gap, tolerance=tol),
        PropertyResult.from_margins('subgradient_certificate', certificates, tolerance=tol),
        PropertyResult.from_flags('perturbed_subgradient_rejected', negatives),
        PropertyResult.from_margins('first_order_bound', taylor, tolerance=tol),
    ]
    return results


def lemmas_suite(
    ctx: ScenarioContext, selection: ParameterSelection, point: OperatingPoint, rng: np.random.Generator
) -> list[PropertyResult]:
    """
    The system-level bounds: Lipschitz constant, the pair's invariants and decrease condition,
    the level-set inclusion, and a short closed-loop run with its per-step margins.
    """
    scenario, clp, f, controls, sampler = ctx.scenario, ctx.clp, ctx.field, ctx.controls, ctx.sampler
    radius, r = scenario.R, scenario.r
    probes = InfConvOptions(probes=scenario.feedback.probes, seed=int(rng.integers(2**31)))
    results = []

    ratio = sampled_lipschitz_ratio(f, sampler, controls, scenario.verify.lipschitz_trials, radius)
    lipschitz = PropertyResult.from_margins(
        'lipschitz_c0', [ctx.system.c0 - ratio], tolerance=scenario.tolerances.bound, sampled=ratio
    )
    results.append(lipschitz)
    results += clp_invariants(clp, sampler, radius)

    annulus = [sampler.annulus(0.5 * r, radius) for _ in range(32)]
    condition4 = [clp_condition4_check(clp, f, controls, m, point.eps, [gradient_lift(clp, m)]) for m in annulus]
    results.append(PropertyResult.from_margins('clp_condition4', [c.worst_margin for c in condition4], eps=point.eps))

    # sampled check of the level-set inclusion, whether or not its sufficient condition holds
    sufficient = level_set_inclusion_holds(selection.moduli_R, point.constants)
    inside = []
    for _ in range(32):
        m = sampler.in_ball(1.5 * radius)
        if inf_convolution(clp, point.kappa, point.eps, m, probes).value <= point.diagnostics.level:
            inside.append(radius - w2_distance(clp.target, m))
    results.append(PropertyResult.from_margins('level_set_inclusion', inside, sufficient_condition=sufficient))

    partition = make_partition(
        point.delta_min, point.delta_max, min(scenario.verify.lemma_horizon, scenario.horizon), 'uniform'
    )
    policy = local_feedback(clp, f, controls, point.kappa, point.eps, probes, point.diagnostics)
    options = TrajectoryOptions(
        clp=clp,
        substeps=scenario.substeps,
        max_substep=scenario.max_substep,
        inf_conv=probes,
        seed=scenario.seed,
        scenario_hash=scenario.hash,
    )
    log = run_theta_trajectory(ctx.initial, partition, policy, f, options)
    results += bound_margin_checks(log, scenario.tolerances.bound)
    results.append(knot_decrease_check(log, point.diagnostics.Rcal_r))

    c3 = c3_constant(radius, point.delta_max, ctx.system.c0, ctx.system.c1, ctx.system.sigma2_target)
    knot_set = set(partition.times)
    knots = [i for i, record in enumerate(log.records) if record.t in knot_set]
    drift = []
    for start, stop in zip(knots, knots[1:], strict=False):
        base, held = log.states[start], controls[log.records[start].control_id]
        for step in range(start + 1, stop + 1):
            elapsed = log.records[step].t - log.records[start].t
            drift.append(c3 * elapsed - drift_difference_norm(f, base, log.states[step], held))
    results.append(PropertyResult.from_margins('drift_difference_bound', drift, tolerance=scenario.tolerances.bound))
    logger.info(f'lemmas suite ran a {len(log.records)}-record trajectory')
    return results
