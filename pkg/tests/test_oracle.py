"""Tests for the brute-force variational oracles."""

import numpy as np
import pytest

from robustbsde.bsdej import solve_criterion
from robustbsde.errors import ConfigurationError, DimensionTooLarge, TreeTooLarge
from robustbsde.lattice import (
    AdaptedProcess,
    TimeGrid,
    build_lattice,
    constant_intensity,
    constant_process,
    discount_process,
    zero_discount,
)
from robustbsde.measure import CriterionSpec
from robustbsde.oracle import (
    concavity_check,
    dv_onestep_grid,
    joint_random_search,
    simplex_grid,
    tree_min_grid,
)


@pytest.fixture
def lattice():
    return build_lattice(TimeGrid(1.0, 2), 1, 1, constant_intensity(0.5))


def _random_spec(lattice, rng, discount, beta: float = 1.0) -> CriterionSpec:
    cost = AdaptedProcess(
        tuple(rng.normal(size=lattice.node_count(k)) for k in range(lattice.steps + 1))
    )
    return CriterionSpec(cost, rng.normal(size=lattice.leaf_count), discount, beta)


def test_simplex_grid_is_lexicographic():
    """Rows sum to one and start from the all-on-last-coordinate corner."""
    grid = simplex_grid(3, 0.1)
    assert grid.shape == (66, 3)
    assert grid.sum(axis=1) == pytest.approx(np.ones(66))
    assert grid[0] == pytest.approx([0.0, 0.0, 1.0])
    assert grid[1] == pytest.approx([0.0, 0.1, 0.9])
    assert grid[-1] == pytest.approx([1.0, 0.0, 0.0])


def test_simplex_grid_limits():
    """Coarse steps and large dimensions are refused."""
    with pytest.raises(ConfigurationError, match="grid step"):
        simplex_grid(2, 0.5 + 0.1)
    with pytest.raises(DimensionTooLarge):
        simplex_grid(5, 0.1)


def test_onestep_grid_two_point():
    """p = (0.5, 0.5), x = (0, 1) at grid 1e-4: value 0.37988 at q = (0.7311, 0.2689)."""
    q, value = dv_onestep_grid(np.array([0.5, 0.5]), np.array([0.0, 1.0]), 1e-4)
    assert value == pytest.approx(0.37988, abs=1e-5)
    assert q == pytest.approx([0.7311, 0.2689], abs=1e-4)


def test_tree_grid_matches_dp(lattice):
    """Grid search over the tree reaches the dp value within ten grid steps."""
    rng = np.random.default_rng(3)
    discount = discount_process(constant_process(0.2, lattice), lattice)
    spec = _random_spec(lattice, rng, discount, beta=1.5)
    _, oracle = tree_min_grid(spec, lattice, 0.01)
    solver = 1.5 * solve_criterion(spec, lattice).initial_value
    assert abs(oracle - solver) <= 0.1
    assert oracle >= solver - 1e-10


def test_one_period_tree_grid():
    """K = 1 with leaves (0, 1) gives the two-point value."""
    lattice = build_lattice(TimeGrid(1.0, 1), 1, 0)
    spec = CriterionSpec(
        constant_process(0.0, lattice), np.array([0.0, 1.0]), zero_discount(lattice)
    )
    measure, value = tree_min_grid(spec, lattice, 0.01)
    assert value == pytest.approx(0.37988, abs=1e-3)
    assert measure.probabilities[0][0] == pytest.approx([0.73, 0.27], abs=0.011)


def test_tree_grid_refuses_deep_trees():
    """More than three steps is too large for the grid oracle."""
    lattice = build_lattice(TimeGrid(1.0, 4), 1, 0)
    spec = CriterionSpec(
        constant_process(0.0, lattice), np.zeros(lattice.leaf_count), zero_discount(lattice)
    )
    with pytest.raises(TreeTooLarge):
        tree_min_grid(spec, lattice)


def test_random_search_never_undercuts_dp(lattice):
    """Sampled measures stay above the dp minimum."""
    rng = np.random.default_rng(11)
    discount = discount_process(constant_process(0.3, lattice), lattice)
    spec = _random_spec(lattice, rng, discount)
    _, best = joint_random_search(spec, lattice, 300, rng)
    assert best >= solve_criterion(spec, lattice).initial_value - 1e-10


def test_random_search_needs_samples(lattice):
    """At least one sample is required."""
    spec = _random_spec(lattice, np.random.default_rng(0), zero_discount(lattice))
    with pytest.raises(ConfigurationError, match="samples"):
        joint_random_search(spec, lattice, 0, np.random.default_rng(0))


def test_value_is_concave_in_inputs(lattice):
    """Y(theta a + (1 - theta) b) >= theta Y(a) + (1 - theta) Y(b)."""
    rng = np.random.default_rng(5)
    discount = discount_process(constant_process(0.1, lattice), lattice)
    first = _random_spec(lattice, rng, discount)
    second = _random_spec(lattice, rng, discount)
    report = concavity_check(first, second, (0.25, 0.5, 0.75), lattice)
    assert report.worst_gap >= -1e-12
    assert report.largest_gap > 0


def test_concavity_needs_common_discount(lattice):
    """Mixing criteria with different discounts is refused."""
    rng = np.random.default_rng(5)
    first = _random_spec(lattice, rng, zero_discount(lattice))
    second = _random_spec(lattice, rng, zero_discount(lattice))
    with pytest.raises(ConfigurationError, match="common discount"):
        concavity_check(first, second, (0.5,), lattice)
