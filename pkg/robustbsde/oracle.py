"""Brute-force minimization over measures, independent of the backward solver.

``dv_onestep_grid`` searches the probability simplex directly, ``tree_min_grid``
chains it node by node, and ``joint_random_search`` samples whole measures and
scores them by forward path sums only.
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import rel_entr

from robustbsde.bsdej import Scheme, solve_bsdej
from robustbsde.errors import ConfigurationError, DimensionTooLarge, TreeTooLarge
from robustbsde.lattice import AdaptedProcess, Lattice
from robustbsde.measure import (
    CriterionSpec,
    EntropyForm,
    NodeMeasure,
    criterion_gamma,
)

logger = logging.getLogger(__name__)

MAX_SIMPLEX_DIMENSION = 4
MAX_GRID_POINTS = 5_000_000
MAX_TREE_STEPS = 3


@lru_cache(maxsize=64)
def _simplex_counts(parts: int, total: int) -> np.ndarray:
    """All nonnegative integer vectors of length ``parts`` summing to ``total``, lexicographic."""
    if parts == 1:
        return np.array([[total]], dtype=np.int64)
    blocks = []
    for first in range(total + 1):
        rest = _simplex_counts(parts - 1, total - first)
        blocks.append(np.column_stack([np.full(rest.shape[0], first, dtype=np.int64), rest]))
    return np.concatenate(blocks)


def simplex_grid(parts: int, grid_step: float) -> np.ndarray:
    """Lexicographically ordered simplex grid with spacing ``grid_step``."""
    if not (0.0 < grid_step <= 0.1):
        raise ConfigurationError(f"grid step must lie in (0, 0.1], got {grid_step}")
    if parts > MAX_SIMPLEX_DIMENSION:
        raise DimensionTooLarge(f"simplex of dimension {parts} > {MAX_SIMPLEX_DIMENSION}")
    total = int(round(1.0 / grid_step))
    size = math.comb(total + parts - 1, parts - 1)
    if size > MAX_GRID_POINTS:
        raise DimensionTooLarge(
            f"{size} grid points for dimension {parts} at step {grid_step}; use a coarser grid"
        )
    return _simplex_counts(parts, total) / total


def dv_onestep_grid(
    probabilities: np.ndarray, child_values: np.ndarray, grid_step: float
) -> tuple[np.ndarray, float]:
    """min of q.x + KL(q || p) over the simplex grid; ties go to the lexicographically first q."""
    p = np.asarray(probabilities, dtype=float)
    x = np.asarray(child_values, dtype=float)
    if p.shape != x.shape or p.ndim != 1:
        raise ConfigurationError("probabilities and values must be vectors of equal length")
    grid = simplex_grid(p.size, grid_step)
    objective = grid @ x + np.sum(rel_entr(grid, p[None, :]), axis=1)
    best = int(np.argmin(objective))
    return grid[best], float(objective[best])


def tree_min_grid(
    spec: CriterionSpec, lattice: Lattice, per_node_grid: float = 0.01
) -> tuple[NodeMeasure, float]:
    """Minimize the stepwise-KL Γ by grid search at every node, backward from the leaves."""
    if lattice.steps > MAX_TREE_STEPS or lattice.branching > MAX_SIMPLEX_DIMENSION:
        raise TreeTooLarge(
            f"tree search needs K <= {MAX_TREE_STEPS} and <= {MAX_SIMPLEX_DIMENSION} children, "
            f"got K={lattice.steps}, B={lattice.branching}"
        )
    spec.cost.check_on(lattice)
    dt = lattice.step
    beta = spec.beta
    value = np.asarray(spec.terminal, dtype=float)
    chosen: list[np.ndarray] = [np.empty(0)] * lattice.steps
    for k in reversed(range(lattice.steps)):
        children = lattice.child_view(k, value) * np.exp(-spec.discount.rate[k] * dt)[:, None]
        q = np.empty_like(lattice.probabilities[k])
        slice_value = np.empty(lattice.node_count(k))
        for node in range(lattice.node_count(k)):
            q[node], best = dv_onestep_grid(
                lattice.probabilities[k][node], children[node] / beta, per_node_grid
            )
            slice_value[node] = spec.cost[k][node] * dt + beta * best
        chosen[k] = q / q.sum(axis=1, keepdims=True)
        value = slice_value
    logger.debug(f"Tree grid minimum {value[0]:.12g} at grid step {per_node_grid}")
    return NodeMeasure(lattice, tuple(chosen)), float(value[0])


def _random_measure(lattice: Lattice, rng: np.random.Generator, scale: float) -> NodeMeasure:
    probabilities = []
    for k in range(lattice.steps):
        base = lattice.probabilities[k]
        noise = rng.normal(0.0, scale, size=base.shape)
        weights = base * np.exp(noise - noise.max(axis=1, keepdims=True))
        probabilities.append(weights / weights.sum(axis=1, keepdims=True))
    return NodeMeasure(lattice, tuple(probabilities))


def joint_random_search(
    spec: CriterionSpec,
    lattice: Lattice,
    samples: int,
    rng: np.random.Generator,
    scales: Sequence[float] = (0.1, 0.5, 2.0),
) -> tuple[NodeMeasure, float]:
    """Smallest Γ (forward path sums) over ``samples`` random equivalent measures.

    Includes P itself, so the result is never above Γ(P).
    """
    if samples < 1:
        raise ConfigurationError(f"samples must be >= 1, got {samples}")
    best_measure = NodeMeasure.base(lattice)
    best = criterion_gamma(spec, best_measure, lattice, EntropyForm.STEPWISE_KL)
    for i in range(samples):
        measure = _random_measure(lattice, rng, scales[i % len(scales)])
        value = criterion_gamma(spec, measure, lattice, EntropyForm.STEPWISE_KL)
        if value < best:
            best_measure, best = measure, value
    return best_measure, best


@dataclass(frozen=True)
class ConcavityReport:
    worst_gap: float
    largest_gap: float


def concavity_check(
    first: CriterionSpec,
    second: CriterionSpec,
    thetas: Sequence[float],
    lattice: Lattice,
    scheme: Scheme | str = Scheme.DP,
) -> ConcavityReport:
    """min and max over θ and nodes of Y^θ - θY^1 - (1-θ)Y^2 for mixed inputs."""
    if first.beta != second.beta:
        raise ConfigurationError("concavity check needs a common beta")
    if first.discount is not second.discount:
        raise ConfigurationError("concavity check needs a common discount")
    if any(not (0.0 < theta < 1.0) for theta in thetas):
        raise ConfigurationError("mixing weights must lie in (0, 1)")
    beta = first.beta

    def values_at(weight: float) -> tuple[np.ndarray, ...]:
        cost = AdaptedProcess(
            tuple(
                (weight * a + (1.0 - weight) * b) / beta
                for a, b in zip(first.cost.values, second.cost.values)
            )
        )
        terminal = (weight * first.terminal + (1.0 - weight) * second.terminal) / beta
        return solve_bsdej(lattice, cost, terminal, first.discount, scheme).values

    y1, y2 = values_at(1.0), values_at(0.0)
    worst, largest = math.inf, -math.inf
    for theta in thetas:
        mixed = values_at(theta)
        for k in range(lattice.steps + 1):
            gap = beta * (mixed[k] - theta * y1[k] - (1.0 - theta) * y2[k])
            worst = min(worst, float(gap.min()))
            largest = max(largest, float(gap.max()))
    return ConcavityReport(worst_gap=worst, largest_gap=largest)
