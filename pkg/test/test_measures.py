import itertools
import math

import numpy as np
import pytest

from stab_flow.errors import DegenerateMeasureError, DimensionMismatchError, InvalidMapError
from stab_flow.measures import (
    EmpiricalMeasure,
    disintegrate_plan,
    displace,
    optimal_plan,
    plan_cost,
    plan_marginal,
    push_forward,
    read_measure_csv,
    recombine_disintegration,
    second_moment_sqrt,
    w2_distance,
    w2_squared,
    write_measure_csv,
)


def _brute_force(a: np.ndarray, b: np.ndarray) -> float:
    return min(
        float(np.mean(np.sum((a - b[list(perm)]) ** 2, axis=1))) for perm in itertools.permutations(range(len(a)))
    )


def test_w2_matches_permutation_oracle():
    """Equal-N W2 agrees with exhaustive search over permutations."""
    rng = np.random.default_rng(0)
    for _ in range(50):
        n, d = int(rng.integers(1, 7)), int(rng.integers(1, 4))
        a, b = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        assert abs(w2_squared(EmpiricalMeasure(a), EmpiricalMeasure(b)) - _brute_force(a, b)) <= 1e-9


def test_w2_symmetric_and_triangle():
    """Symmetry is exact, the triangle inequality holds to 1e-9."""
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b, c = (EmpiricalMeasure(rng.normal(size=(20, 2))) for _ in range(3))
        assert w2_distance(a, b) == w2_distance(b, a)
        assert w2_distance(a, c) <= w2_distance(a, b) + w2_distance(b, c) + 1e-9


def test_w2_to_single_atom_is_second_moment():
    """Distance to a Dirac at the origin is the root second moment."""
    m = EmpiricalMeasure(np.array([[3.0, 4.0], [0.0, 0.0]]))
    origin = EmpiricalMeasure(np.zeros((1, 2)))
    assert math.isclose(w2_distance(m, origin), math.sqrt(12.5))
    assert math.isclose(second_moment_sqrt(m), math.sqrt(12.5))


def test_w2_identical_measures_is_zero():
    """Permuted copies of one point set are at distance zero."""
    points = np.array([[0.0, 1.0], [2.0, 3.0], [4.0, 5.0]])
    assert w2_distance(EmpiricalMeasure(points), EmpiricalMeasure(points[::-1])) == 0.0


def test_unequal_counts_plan_marginals():
    """Unequal-N plans keep both marginals to machine precision."""
    rng = np.random.default_rng(2)
    m, nu = EmpiricalMeasure(rng.normal(size=(5, 2))), EmpiricalMeasure(rng.normal(size=(3, 2)))
    plan = optimal_plan(m, nu)
    assert plan.marginal_error() <= 1e-12
    assert not plan.is_permutation
    assert plan_cost(plan, m, nu).squared_cost == pytest.approx(w2_squared(m, nu))


def test_duplicate_atoms_pair_canonically():
    """Ties among duplicate source atoms resolve to the smallest pairing."""
    m = EmpiricalMeasure(np.array([[0.0], [0.0], [5.0]]))
    nu = EmpiricalMeasure(np.array([[1.0], [-1.0], [5.0]]))
    plan = optimal_plan(m, nu)
    assert plan.permutation().tolist() == [0, 1, 2]


def _lexicographic_oracle(a: np.ndarray, b: np.ndarray) -> list[int]:
    costs = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2).astype(int)
    perms = list(itertools.permutations(range(len(a))))
    totals = [sum(costs[i, p[i]] for i in range(len(a))) for p in perms]
    return list(perms[totals.index(min(totals))])


def test_ties_between_distinct_atoms_pick_smallest_pairing():
    """Among equal-cost assignments of distinct atoms the lexicographically smallest wins."""
    m = EmpiricalMeasure(np.array([[2.0, 1.0], [0.0, -1.0], [-1.0, -2.0], [-2.0, -2.0]]))
    nu = EmpiricalMeasure(np.array([[-2.0, 2.0], [1.0, 2.0], [0.0, 1.0], [2.0, 1.0]]))
    assert optimal_plan(m, nu).permutation().tolist() == [1, 3, 2, 0]

    rng = np.random.default_rng(8)
    for _ in range(300):
        n = int(rng.integers(2, 6))
        a = rng.integers(-2, 3, size=(n, 2)).astype(float)
        b = rng.integers(-2, 3, size=(n, 2)).astype(float)
        plan = optimal_plan(EmpiricalMeasure(a), EmpiricalMeasure(b))
        assert plan.permutation().tolist() == _lexicographic_oracle(a, b)


def test_disintegration_round_trip():
    """Recombining the conditionals with the marginal gives the plan back."""
    rng = np.random.default_rng(3)
    plan = optimal_plan(EmpiricalMeasure(rng.normal(size=(4, 2))), EmpiricalMeasure(rng.normal(size=(6, 2))))
    for variable in (1, 2):
        conditionals = disintegrate_plan(plan, variable)
        for conditional in conditionals.values():
            assert sum(conditional.values()) == pytest.approx(1.0)
        rebuilt = recombine_disintegration(conditionals, plan_marginal(plan, variable), variable, 4, 6)
        for (s1, t1, x1), (s2, t2, x2) in zip(sorted(rebuilt.pairs), sorted(plan.pairs), strict=True):
            assert (s1, t1) == (s2, t2)
            assert x1 == pytest.approx(x2, abs=1e-15)


def test_push_forward_and_displace():
    """Both image constructions move particle i to its image."""
    m = EmpiricalMeasure(np.array([[1.0, 0.0], [0.0, 2.0]]))
    doubled = push_forward(m, lambda x: 2 * x)
    assert np.array_equal(doubled.points, 2 * m.points)
    shifted = displace(m, np.ones((2, 2)))
    assert np.array_equal(shifted.points, m.points + 1)


def test_invalid_inputs_raise():
    """Empty measures, bad maps and mismatched dimensions are rejected."""
    with pytest.raises(DegenerateMeasureError):
        EmpiricalMeasure(np.zeros((0, 2)))
    m = EmpiricalMeasure(np.zeros((2, 2)))
    with pytest.raises(InvalidMapError):
        push_forward(m, lambda x: np.array([np.inf, 0.0]))
    with pytest.raises(InvalidMapError):
        push_forward(m, lambda x: np.zeros(3))
    with pytest.raises(DimensionMismatchError):
        w2_distance(m, EmpiricalMeasure(np.zeros((2, 3))))


def test_measure_csv_round_trip(tmp_path):
    """Written measures read back bit for bit."""
    rng = np.random.default_rng(4)
    m = EmpiricalMeasure(rng.normal(size=(7, 3)))
    path = str(tmp_path / 'm.csv')
    write_measure_csv(m, path)
    assert open(path).readline().strip() == 'x0,x1,x2'
    assert np.array_equal(read_measure_csv(path).points, m.points)
