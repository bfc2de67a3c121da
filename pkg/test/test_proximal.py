import math

import numpy as np
import pytest

from stab_flow.dynamics import ControlSet, make_field
from stab_flow.errors import ConfigurationError, DimensionMismatchError
from stab_flow.lyapunov import builtin_quadratic_clp
from stab_flow.measures import EmpiricalMeasure, SubgradientMeasure
from stab_flow.proximal import (
    InfConvOptions,
    build_probes,
    coupled_value,
    ekeland_verify,
    gamma_subgradient,
    inf_convolution,
    proximal_subgradient_verify,
    taylor_bound_verify,
)

ORIGIN = EmpiricalMeasure(np.zeros((1, 2)))
CLP = builtin_quadratic_clp(ORIGIN, ControlSet.lattice(2, 1.0, 3), make_field('linear_steer'))
M = EmpiricalMeasure(np.array([[1.0, 0.0], [0.0, -1.5], [0.5, 0.5], [-0.8, 0.3]]))


@pytest.mark.parametrize('kappa', [0.25, 0.5, 1.0])
def test_moreau_closed_form(kappa):
    """For phi = half the second moment the minimizer is x / (1 + kappa^2)."""
    result = inf_convolution(CLP, kappa, 1e-6, M)
    assert result.ekeland_ok
    assert result.value == pytest.approx(CLP.phi(M) / (1 + kappa**2), abs=1e-9)
    assert np.allclose(result.minimizer.points, M.points / (1 + kappa**2), atol=1e-6)
    assert result.distance == pytest.approx(math.sqrt(2 * CLP.phi(M)) * kappa**2 / (1 + kappa**2), abs=1e-6)


def test_inf_convolution_below_phi():
    """phi_kappa never exceeds phi and vanishes at the target."""
    assert inf_convolution(CLP, 0.5, 1e-4, M).value <= CLP.phi(M)
    assert inf_convolution(CLP, 0.5, 1e-4, ORIGIN).value == pytest.approx(0.0, abs=1e-12)


def test_inf_convolution_argument_checks():
    """kappa outside (0, 1], non-positive eps and foreign dimensions are rejected."""
    with pytest.raises(ConfigurationError):
        inf_convolution(CLP, 1.5, 1e-3, M)
    with pytest.raises(ConfigurationError):
        inf_convolution(CLP, 0.5, 0.0, M)
    with pytest.raises(DimensionMismatchError):
        inf_convolution(CLP, 0.5, 1e-3, EmpiricalMeasure(np.zeros((2, 3))))


def test_warm_start_reaches_the_same_value():
    """Starting from the exact minimizer gives the same value."""
    exact = EmpiricalMeasure(M.points / 1.25)
    warm = inf_convolution(CLP, 0.5, 1e-6, M, warm_start=exact)
    assert warm.value == pytest.approx(CLP.phi(M) / 1.25, abs=1e-9)
    assert warm.iterations <= inf_convolution(CLP, 0.5, 1e-6, M).iterations


def test_ekeland_accepts_minimizer_and_rejects_source():
    """The exact minimizer passes both inequalities, a far point fails the first."""
    kappa = 0.5
    rng = np.random.default_rng(0)
    exact = EmpiricalMeasure(M.points / (1 + kappa**2))
    verdict = ekeland_verify(CLP, kappa, 1e-3, M, exact, build_probes(M, exact, kappa, 40, rng))
    assert verdict.ok
    assert verdict.condition1_margin > 0
    far = EmpiricalMeasure(M.points * 3)
    rejected = ekeland_verify(CLP, kappa, 1e-3, M, far, build_probes(M, far, kappa, 40, rng))
    assert not rejected.ok
    assert rejected.failing_kind == 'source'
    assert coupled_value(CLP, kappa, M, far) > CLP.phi(M)


def test_ekeland_needs_probes():
    """An empty probe list is a configuration error."""
    with pytest.raises(ConfigurationError):
        ekeland_verify(CLP, 0.5, 1e-3, M, M, [])


def test_gamma_subgradient_covectors():
    """Covectors are (x - y) / kappa^2, here x / (1 + kappa^2)."""
    kappa = 0.5
    result = inf_convolution(CLP, kappa, 1e-6, M)
    alpha = gamma_subgradient(result, kappa)
    order = np.argsort(result.plan.sources)
    assert np.allclose(alpha.covectors[order], M.points / (1 + kappa**2), atol=1e-5)
    assert alpha.masses.sum() == pytest.approx(1.0)


def test_subgradient_certificate():
    """The true gradient is a proximal subgradient, twice the gradient is not."""
    probes = [M, EmpiricalMeasure(1.1 * M.points), EmpiricalMeasure(0.9 * M.points)]
    masses = np.full(M.n, 1 / M.n)
    good = SubgradientMeasure(M.points, M.points, masses)
    report = proximal_subgradient_verify(CLP, M, good, 1e-3, 0.0, 1.0, probes)
    assert report.ok
    assert report.probes_used == 3
    doubled = SubgradientMeasure(M.points, 2 * M.points, masses)
    assert not proximal_subgradient_verify(CLP, M, doubled, 1e-3, 0.0, 1.0, probes).ok


def test_gamma_certificate_with_proximal_penalty():
    """gamma passes at the minimizer with sigma = 1 / (2 kappa^2); doubling its covectors breaks it."""
    kappa = 0.5
    result = inf_convolution(CLP, kappa, 1e-9, M)
    alpha = gamma_subgradient(result, kappa)
    base = result.minimizer
    probes = [base, *(EmpiricalMeasure(scale * base.points) for scale in (0.9, 1.05, 1.1, 1.2))]
    sigma = 1 / (2 * kappa**2)
    report = proximal_subgradient_verify(CLP, base, alpha, result.eps_used, sigma, 1.0, probes)
    assert report.ok
    assert report.couplings_tested >= 5
    doubled = SubgradientMeasure(alpha.positions, 2 * alpha.covectors, alpha.masses)
    assert not proximal_subgradient_verify(CLP, base, doubled, result.eps_used, sigma, 1.0, probes).ok


def test_subgradient_needs_matching_positions():
    """Atoms away from the base particles are rejected."""
    alpha = SubgradientMeasure(M.points + 1.0, M.points, np.full(M.n, 1 / M.n))
    with pytest.raises(DimensionMismatchError):
        proximal_subgradient_verify(CLP, M, alpha, 1e-3, 0.0, 1.0, [M])


def test_taylor_bound_along_the_steering_field():
    """Moving towards the target keeps phi_kappa below its first-order bound."""
    for tau in (0.01, 0.1):
        verdict = taylor_bound_verify(CLP, 0.5, 1e-6, M, -M.points, tau, 2.0, InfConvOptions())
        assert verdict.ok
        assert verdict.slack >= -1e-9
    with pytest.raises(ConfigurationError):
        taylor_bound_verify(CLP, 0.5, 1e-6, M, -M.points, 0.0, 2.0)
