"""
Uniform empirical measures and exact discrete optimal transport.

Equal particle counts are solved as an assignment problem, unequal counts as a
transportation LP whose vertex solution is re-balanced exactly on its support.
"""

from collections import defaultdict, deque
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
from cpg_utils import to_path
from scipy import sparse
from scipy.optimize import linear_sum_assignment, linprog
from scipy.spatial.distance import cdist

from stab_flow.errors import DegenerateMeasureError, DimensionMismatchError, InvalidMapError, StabError

# dense cost matrices beyond this many entries are out of scope
MAX_COST_ENTRIES = 25_000_000

# reduced costs within this relative slack count as ties between optimal assignments
TIE_TOLERANCE = 1e-9


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """
    N equally weighted points in R^d, each carrying mass 1/N.

    A 1-D input array is read as N points on the line.
    """

    points: np.ndarray

    def __post_init__(self) -> None:
        pts = np.array(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise DegenerateMeasureError(f'a measure needs at least one point with d >= 1 coordinates, got {pts.shape}')
        if not np.all(np.isfinite(pts)):
            raise InvalidMapError('measure points must be finite')
        pts.setflags(write=False)
        object.__setattr__(self, 'points', pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def mean(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def same_support(self, other: 'EmpiricalMeasure', tol: float = 1e-12) -> bool:
        """True if both measures carry the same multiset of points (up to tol per coordinate)"""
        if self.n != other.n or self.dim != other.dim:
            return False
        return bool(np.all(np.abs(_sorted_rows(self.points) - _sorted_rows(other.points)) <= tol))


@dataclass(frozen=True, eq=False)
class TransportPlan:
    """A coupling between two empirical measures, stored as (source, target, mass) triples"""

    sources: np.ndarray
    targets: np.ndarray
    masses: np.ndarray
    source_n: int
    target_n: int

    def __post_init__(self) -> None:
        sources = np.asarray(self.sources, dtype=int)
        targets = np.asarray(self.targets, dtype=int)
        masses = np.asarray(self.masses, dtype=float)
        if not (sources.shape == targets.shape == masses.shape) or sources.ndim != 1:
            raise DimensionMismatchError('plan sources, targets and masses must be equal-length vectors')
        if sources.size == 0:
            raise DegenerateMeasureError('a plan needs at least one pair')
        if np.any(masses <= 0):
            raise DegenerateMeasureError('plan masses must be positive')
        for name, value in (('sources', sources), ('targets', targets), ('masses', masses)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def pairs(self) -> list[tuple[int, int, float]]:
        return list(zip(self.sources.tolist(), self.targets.tolist(), self.masses.tolist(), strict=True))

    @property
    def is_permutation(self) -> bool:
        if self.source_n != self.target_n or self.sources.size != self.source_n:
            return False
        return bool(
            np.array_equal(np.sort(self.sources), np.arange(self.source_n))
            and np.array_equal(np.sort(self.targets), np.arange(self.target_n))
        )

    def permutation(self) -> np.ndarray:
        """target index for each source index; only defined for permutation plans"""
        if not self.is_permutation:
            raise StabError('plan is not a permutation')
        perm = np.empty(self.source_n, dtype=int)
        perm[self.sources] = self.targets
        return perm

    def marginal_error(self) -> float:
        """Largest deviation of either marginal from the uniform weights"""
        src = np.bincount(self.sources, weights=self.masses, minlength=self.source_n)
        tgt = np.bincount(self.targets, weights=self.masses, minlength=self.target_n)
        return float(max(np.max(np.abs(src - 1 / self.source_n)), np.max(np.abs(tgt - 1 / self.target_n))))

    def squared_cost(self, m: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
        diff = m.points[self.sources] - nu.points[self.targets]
        return float(np.sum(self.masses * np.sum(diff * diff, axis=1)))


@dataclass(frozen=True, eq=False)
class SubgradientMeasure:
    """
    A discrete measure on (position, covector) pairs. Covectors are stored as row vectors
    in the same coordinates as the positions.
    """

    positions: np.ndarray
    covectors: np.ndarray
    masses: np.ndarray

    def __post_init__(self) -> None:
        positions = np.array(self.positions, dtype=float)
        covectors = np.array(self.covectors, dtype=float)
        masses = np.array(self.masses, dtype=float).reshape(-1)
        if positions.ndim != 2 or positions.shape != covectors.shape or masses.shape != (positions.shape[0],):
            raise DimensionMismatchError('subgradient atoms need matching positions, covectors and masses')
        if masses.size == 0:
            raise DegenerateMeasureError('a subgradient measure needs at least one atom')
        if np.any(masses <= 0) or abs(masses.sum() - 1.0) > 1e-12:
            raise DegenerateMeasureError('subgradient masses must be positive and sum to 1')
        if not (np.all(np.isfinite(positions)) and np.all(np.isfinite(covectors))):
            raise InvalidMapError('subgradient atoms must be finite')
        for name, value in (('positions', positions), ('covectors', covectors), ('masses', masses)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    @property
    def atoms(self) -> list[tuple[np.ndarray, np.ndarray, float]]:
        return list(zip(self.positions, self.covectors, self.masses.tolist(), strict=True))

    def second_moments(self) -> tuple[float, float]:
        """second moments of the position and covector marginals"""
        pos = float(np.sum(self.masses * np.sum(self.positions**2, axis=1)))
        cov = float(np.sum(self.masses * np.sum(self.covectors**2, axis=1)))
        return pos, cov


@dataclass(frozen=True)
class PlanCostReport:
    squared_cost: float
    is_optimal: bool


def plan_cost(
    plan: TransportPlan, m: EmpiricalMeasure, nu: EmpiricalMeasure, is_optimal: bool = False
) -> PlanCostReport:
    return PlanCostReport(squared_cost=plan.squared_cost(m, nu), is_optimal=is_optimal)


def identity_plan(n: int) -> TransportPlan:
    """The coupling i -> i between two measures with the same particle count"""
    idx = np.arange(n)
    return TransportPlan(sources=idx, targets=idx, masses=np.full(n, 1 / n), source_n=n, target_n=n)


def push_forward(m: EmpiricalMeasure, mapping: Callable[[np.ndarray], np.ndarray]) -> EmpiricalMeasure:
    """Image of m under a point-to-point map; point i of the result is mapping(point i)"""
    images = []
    for point in m.points:
        image = np.asarray(mapping(point.copy()), dtype=float).reshape(-1)
        if image.shape != (m.dim,):
            raise InvalidMapError(f'map returned a {image.shape[0]}-vector for a {m.dim}-dimensional measure')
        if not np.all(np.isfinite(image)):
            raise InvalidMapError(f'map returned a non-finite image for point {point.tolist()}')
        images.append(image)
    return EmpiricalMeasure(np.stack(images))


def displace(m: EmpiricalMeasure, vectors: np.ndarray) -> EmpiricalMeasure:
    """(Id + v)#m for a per-particle vector field v"""
    vectors = np.asarray(vectors, dtype=float)
    if vectors.shape != m.points.shape:
        raise DimensionMismatchError(f'displacement of shape {vectors.shape} does not match measure {m.points.shape}')
    return EmpiricalMeasure(m.points + vectors)


def second_moment_sqrt(m: EmpiricalMeasure, base: np.ndarray | None = None) -> float:
    if base is None:
        base = np.zeros(m.dim)
    base = np.asarray(base, dtype=float).reshape(-1)
    if base.shape != (m.dim,):
        raise DimensionMismatchError(f'base point has dimension {base.shape[0]}, measure has {m.dim}')
    diff = m.points - base
    return float(np.sqrt(np.mean(np.sum(diff * diff, axis=1))))


def optimal_plan(m: EmpiricalMeasure, nu: EmpiricalMeasure) -> TransportPlan:
    """
    An optimal coupling between m and nu.

    Equal N: an assignment (one pair per source, mass 1/N), ties among optimal assignments
    resolved to the lexicographically smallest pairing by (source index, target index).
    Unequal N: a vertex of the transportation LP.
    """
    if m.dim != nu.dim:
        raise DimensionMismatchError(f'cannot couple measures of dimension {m.dim} and {nu.dim}')
    if m.n * nu.n > MAX_COST_ENTRIES:
        raise StabError(f'cost matrix {m.n}x{nu.n} is too large for exact transport')

    if nu.n == 1:
        return TransportPlan(np.arange(m.n), np.zeros(m.n, dtype=int), np.full(m.n, 1 / m.n), m.n, 1)
    if m.n == 1:
        return TransportPlan(np.zeros(nu.n, dtype=int), np.arange(nu.n), np.full(nu.n, 1 / nu.n), 1, nu.n)

    cost = cdist(m.points, nu.points, 'sqeuclidean')
    if m.n == nu.n:
        rows, cols = linear_sum_assignment(cost)
        cols = _lexicographic_assignment(cost, cols[np.argsort(rows)])
        return TransportPlan(np.arange(m.n), cols, np.full(m.n, 1 / m.n), m.n, nu.n)
    return _transport_lp(cost, m.n, nu.n)


def w2_squared(m: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    # evaluate in a canonical argument order so that W2(m, nu) and W2(nu, m) are bit-identical
    if (nu.n, nu.points.tobytes()) < (m.n, m.points.tobytes()):
        m, nu = nu, m
    return max(optimal_plan(m, nu).squared_cost(m, nu), 0.0)


def w2_distance(m: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    return float(np.sqrt(w2_squared(m, nu)))


def disintegrate_plan(plan: TransportPlan, variable_index: int) -> dict[int, dict[int, float]]:
    """
    Conditional distributions of a plan given its first (1) or second (2) variable.

    Keys are the conditioning indices, values map the other index to a conditional mass;
    each conditional sums to one.
    """
    if variable_index not in (1, 2):
        raise StabError(f'variable_index must be 1 or 2, got {variable_index}')
    if plan.masses.size == 0:
        raise DegenerateMeasureError('cannot disintegrate an empty plan')

    keys, others = (plan.sources, plan.targets) if variable_index == 1 else (plan.targets, plan.sources)
    grouped: dict[int, dict[int, float]] = defaultdict(dict)
    for key, other, mass in zip(keys.tolist(), others.tolist(), plan.masses.tolist(), strict=True):
        grouped[key][other] = grouped[key].get(other, 0.0) + mass

    conditionals = {}
    for key in sorted(grouped):
        total = sum(grouped[key].values())
        conditionals[key] = {other: mass / total for other, mass in sorted(grouped[key].items())}
    return conditionals


def plan_marginal(plan: TransportPlan, variable_index: int) -> dict[int, float]:
    keys = plan.sources if variable_index == 1 else plan.targets
    totals = np.bincount(keys, weights=plan.masses)
    return {int(k): float(totals[k]) for k in np.unique(keys)}


def recombine_disintegration(
    conditionals: dict[int, dict[int, float]],
    marginal: dict[int, float],
    variable_index: int,
    source_n: int,
    target_n: int,
) -> TransportPlan:
    """Inverse of disintegrate_plan: weight each conditional by its marginal mass"""
    triples = []
    for key, conditional in sorted(conditionals.items()):
        for other, weight in sorted(conditional.items()):
            src, tgt = (key, other) if variable_index == 1 else (other, key)
            triples.append((src, tgt, marginal[key] * weight))
    triples.sort()
    src, tgt, mass = zip(*triples, strict=True)
    return TransportPlan(np.array(src), np.array(tgt), np.array(mass), source_n, target_n)


def write_measure_csv(m: EmpiricalMeasure, path: str) -> None:
    header = ','.join(f'x{i}' for i in range(m.dim))
    with to_path(path).open('w') as handle:
        np.savetxt(handle, m.points, delimiter=',', header=header, comments='', fmt='%.17g')


def read_measure_csv(path: str) -> EmpiricalMeasure:
    with to_path(path).open() as handle:
        header = handle.readline().strip().split(',')
        if header != [f'x{i}' for i in range(len(header))]:
            raise StabError(f'{path}: expected a header x0,...,x{{d-1}}, got {header}')
        points = np.loadtxt(handle, delimiter=',', ndmin=2)
    if points.shape[1] != len(header):
        raise DimensionMismatchError(f'{path}: header names {len(header)} coordinates, rows have {points.shape[1]}')
    return EmpiricalMeasure(points)


def _sorted_rows(points: np.ndarray) -> np.ndarray:
    return points[np.lexsort(points.T[::-1])]


def _assignment_potentials(cost: np.ndarray, cols: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Dual potentials with u_i + v_j <= cost_ij, equal along the optimal assignment i -> cols[i]"""
    n = cost.shape[0]
    own = cost[np.arange(n), cols]
    # weights[i, k]: extra cost of row i taking row k's column
    weights = cost[:, cols] - own[:, None]
    p = np.zeros(n)
    for _ in range(n):
        relaxed = np.minimum(p, (p[:, None] + weights).min(axis=0))
        if np.array_equal(relaxed, p):
            break
        p = relaxed
    v = np.empty(n)
    v[cols] = p
    return own - p, v


def _alternating_path(
    tight: np.ndarray, match: np.ndarray, row_of: np.ndarray, start: int, goal: int, fixed: int
) -> list[tuple[int, int]] | None:
    """
    Reassignments moving row `start` off its column along tight edges until column `goal` is
    taken, using only rows above `fixed`. None when no such path exists.
    """
    parent: dict[int, int | None] = {start: None}
    queue = deque([start])
    while queue:
        row = queue.popleft()
        for col in np.flatnonzero(tight[row]).tolist():
            if col == goal:
                moves = []
                current: int | None = row
                taken = col
                while current is not None:
                    moves.append((current, taken))
                    taken = int(match[current])
                    current = parent[current]
                return moves
            following = int(row_of[col])
            if following <= fixed or following in parent:
                continue
            parent[following] = row
            queue.append(following)
    return None


def _lexicographic_assignment(cost: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """
    The lexicographically smallest (source, target) pairing among all assignments of optimal
    cost. Every optimal assignment lives on the tight edges of an optimal dual, so each row in
    turn takes its smallest tight column that still leaves a perfect tight matching.
    """
    n = cost.shape[0]
    u, v = _assignment_potentials(cost, cols)
    slack = TIE_TOLERANCE * max(1.0, float(np.abs(cost).max()))
    tight = cost - u[:, None] - v[None, :] <= slack
    match = cols.astype(int).copy()
    if int(tight.sum()) == n:
        return match
    row_of = np.empty(n, dtype=int)
    row_of[match] = np.arange(n)
    for i in range(n):
        for j in np.flatnonzero(tight[i]).tolist():
            if j == match[i]:
                break
            if row_of[j] < i:
                continue
            moves = _alternating_path(tight, match, row_of, int(row_of[j]), int(match[i]), i)
            if moves is None:
                continue
            for row, col in moves:
                match[row] = col
                row_of[col] = row
            match[i] = j
            row_of[j] = i
            break
    return match


def _transport_lp(cost: np.ndarray, n: int, k: int) -> TransportPlan:
    a_eq = sparse.vstack(
        [
            sparse.kron(sparse.eye(n), np.ones((1, k))),
            sparse.kron(np.ones((1, n)), sparse.eye(k)),
        ],
        format='csr',
    )
    b_eq = np.concatenate([np.full(n, 1 / n), np.full(k, 1 / k)])
    result = linprog(cost.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method='highs-ds')
    if not result.success:
        raise StabError(f'transportation LP failed: {result.message}')

    flow = result.x.reshape(n, k)
    # vertex entries are multiples of 1/lcm(n, k) >= 1/(n k)
    rows, cols = np.nonzero(flow > 0.5 / (n * k))
    masses = _rebalance_on_forest(rows, cols, n, k)
    if masses is None:
        masses = flow[rows, cols] / flow[rows, cols].sum()
    return TransportPlan(rows, cols, masses, n, k)


def _rebalance_on_forest(rows: np.ndarray, cols: np.ndarray, n: int, k: int) -> np.ndarray | None:
    """
    Recompute the masses of a plan whose support is a forest by peeling leaves, so that
    both marginals hold to machine precision. Returns None if the support has a cycle.
    """
    remaining = np.concatenate([np.full(n, 1 / n), np.full(k, 1 / k)])
    edges_of: list[list[int]] = [[] for _ in range(n + k)]
    for e, (r, c) in enumerate(zip(rows.tolist(), cols.tolist(), strict=True)):
        edges_of[r].append(e)
        edges_of[n + c].append(e)
    ends = [(int(r), n + int(c)) for r, c in zip(rows, cols, strict=True)]
    degree = [len(edges) for edges in edges_of]
    active = [True] * len(ends)
    masses = np.zeros(len(ends))

    leaves = [node for node in range(n + k) if degree[node] == 1]
    while leaves:
        node = leaves.pop()
        if degree[node] != 1:
            continue
        edge = next(e for e in edges_of[node] if active[e])
        other = ends[edge][1] if ends[edge][0] == node else ends[edge][0]
        masses[edge] = remaining[node]
        remaining[other] -= remaining[node]
        remaining[node] = 0.0
        active[edge] = False
        degree[node] -= 1
        degree[other] -= 1
        if degree[other] == 1:
            leaves.append(other)

    if any(active) or np.any(masses <= 0):
        return None
    return masses
