"""
Seeded generators of particle measures placed at controlled W2 distances from a target.
"""

import numpy as np

from stab_flow.errors import ConfigurationError, DegenerateMeasureError
from stab_flow.measures import EmpiricalMeasure, w2_distance


class MeasureSampler:
    """
    Random N-particle measures around a target measure.

    The target must be a single atom or have a particle count dividing N. For a single-atom
    target the requested distances are met exactly; otherwise they are met by bisection on
    the displacement scale.
    """

    def __init__(self, target: EmpiricalMeasure, particles: int, seed: int | np.random.Generator):
        if particles < 1:
            raise ConfigurationError(f'particle count must be positive, got {particles}')
        if target.n != 1 and particles % target.n != 0:
            raise ConfigurationError(f'target with {target.n} atoms cannot be tiled onto {particles} particles')
        self.target = target
        self.particles = particles
        self.dim = target.dim
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self._base = np.tile(target.points, (particles // target.n, 1))

    def direction(self) -> np.ndarray:
        """A displacement field with unit L2 norm; occasionally a rigid shift or a single-particle spike"""
        kind = self.rng.integers(4)
        if kind == 0:
            shift = self.rng.standard_normal(self.dim)
            vectors = np.tile(shift, (self.particles, 1))
        elif kind == 1 and self.particles > 1:
            vectors = np.zeros((self.particles, self.dim))
            vectors[self.rng.integers(self.particles)] = self.rng.standard_normal(self.dim)
        else:
            vectors = self.rng.standard_normal((self.particles, self.dim)) * self.rng.uniform(0.2, 2.0)
            vectors += self.rng.standard_normal(self.dim)
        norm = np.sqrt(np.mean(np.sum(vectors * vectors, axis=1)))
        if norm == 0:
            return self.direction()
        return vectors / norm

    def at_distance(self, rho: float, vectors: np.ndarray | None = None) -> EmpiricalMeasure:
        """A measure at W2 distance rho from the target, along the given (or a random) direction"""
        if rho < 0:
            raise DegenerateMeasureError(f'distance must be nonnegative, got {rho}')
        if vectors is None:
            vectors = self.direction()
        if rho == 0:
            return EmpiricalMeasure(self._base.copy())
        if self.target.n == 1:
            return EmpiricalMeasure(self._base + rho * vectors)

        def dist(scale: float) -> float:
            return w2_distance(self.target, EmpiricalMeasure(self._base + scale * vectors))

        lo, hi = 0.0, rho
        while dist(hi) < rho:
            lo, hi = hi, 2 * hi
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if dist(mid) < rho:
                lo = mid
            else:
                hi = mid
        return EmpiricalMeasure(self._base + lo * vectors)

    def in_ball(self, radius: float, boundary_rate: float = 0.25) -> EmpiricalMeasure:
        """W2(target, mu) <= radius; a share of draws sits on the sphere itself"""
        if self.rng.uniform() < boundary_rate:
            return self.at_distance(radius)
        return self.at_distance(radius * np.sqrt(self.rng.uniform()))

    def on_sphere(self, radius: float) -> EmpiricalMeasure:
        return self.at_distance(radius)

    def annulus(self, inner: float, outer: float) -> EmpiricalMeasure:
        return self.at_distance(self.rng.uniform(inner, outer))

    def outside_ball(self, radius: float, spread: float = 2.0) -> EmpiricalMeasure:
        return self.at_distance(radius * self.rng.uniform(1.0, spread))

    def close_pair(self, radius: float, delta: float) -> tuple[EmpiricalMeasure, EmpiricalMeasure]:
        """Two measures inside B_radius(target) with W2 distance at most delta"""
        if radius > delta:
            first = self.in_ball(radius - delta)
            step = delta * np.sqrt(self.rng.uniform()) * self.direction()
            return first, EmpiricalMeasure(first.points + step)
        return self.in_ball(0.5 * radius), self.in_ball(0.5 * radius)

    def random_measure(self, scale: float = 1.0) -> EmpiricalMeasure:
        return EmpiricalMeasure(self._base + scale * self.rng.standard_normal((self.particles, self.dim)))
