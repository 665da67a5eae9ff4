"""Tests for the budget problem: fixed point, multiplier search and optimality."""

import math
from unittest.mock import patch

import numpy as np
import pytest

from robustbsde import max_principle
from robustbsde.errors import (
    BracketFailure,
    BudgetNotMet,
    ConfigurationError,
    NoConvergence,
    NonpositiveCapital,
    NonpositiveNu,
)
from robustbsde.lattice import (
    AdaptedProcess,
    TimeGrid,
    build_lattice,
    constant_intensity,
    constant_process,
    discount_process,
    zero_discount,
)
from robustbsde.max_principle import (
    BudgetProblem,
    budget,
    candidate_plan,
    gateaux_consistency,
    initial_plan,
    lagrangian,
    solve_fixed_point,
    solve_nu,
    solve_optimal_plan,
    solve_plan,
    value_curve,
)
from robustbsde.measure import GirsanovTilt, NodeMeasure, tilt_to_measure
from robustbsde.preferences import Plan, UtilitySpec


@pytest.fixture
def single_path():
    lattice = build_lattice(TimeGrid(1.0, 4), 0, 0, single_path=True)
    return BudgetProblem(
        capital=2.0,
        pricing=NodeMeasure.base(lattice),
        discount=zero_discount(lattice),
        utility=UtilitySpec.parse("log"),
        terminal_utility=UtilitySpec.parse("none"),
    )


@pytest.fixture
def jump_problem():
    lattice = build_lattice(TimeGrid(1.0, 3), 1, 1, constant_intensity(0.5))
    return BudgetProblem(
        capital=1.0,
        pricing=tilt_to_measure(GirsanovTilt([0.2], [0.1]), lattice),
        discount=discount_process(constant_process(0.1, lattice), lattice),
        utility=UtilitySpec.parse("power:0.5"),
        terminal_utility=UtilitySpec.parse("power:0.5"),
    )


@pytest.fixture
def log_problem():
    lattice = build_lattice(TimeGrid(1.0, 3), 1, 1, constant_intensity(0.5))
    return BudgetProblem(
        capital=1.0,
        pricing=tilt_to_measure(GirsanovTilt([0.2], [0.1]), lattice),
        discount=discount_process(constant_process(0.1, lattice), lattice),
        utility=UtilitySpec.parse("log"),
        terminal_utility=UtilitySpec.parse("none"),
    )


def test_single_path_log_closed_form(single_path):
    """log utility, delta = 0, T = 1, x = 2: nu = 1/2 and c = 2 everywhere."""
    optimal = solve_optimal_plan(single_path, damping=1.0)
    assert optimal.nu == pytest.approx(0.5, abs=1e-10)
    for c in optimal.plan.consumption.values[:-1]:
        assert c == pytest.approx([2.0], abs=1e-10)
    assert optimal.iterations <= 2
    assert optimal.value == pytest.approx(math.log(2.0))
    assert optimal.stationarity <= 1e-10


def test_initial_plan_binds_budget(jump_problem):
    """The starting plan already spends exactly x."""
    plan = initial_plan(jump_problem)
    assert budget(plan, jump_problem) == pytest.approx(jump_problem.capital)


def test_fixed_point_converges(jump_problem):
    """Damped iteration reaches a plan equal to its own candidate."""
    result = solve_fixed_point(1.0, jump_problem, damping=0.5, tol=1e-10)
    candidate = candidate_plan(1.0, result.solution.qstar, jump_problem)
    assert result.plan.relative_change(candidate) <= 1e-10
    assert result.residual <= 1e-10


def test_fixed_point_reports_last_iterate(single_path):
    """Running out of iterations raises with the last plan attached."""
    with pytest.raises(NoConvergence) as info:
        solve_fixed_point(1.0, single_path, damping=0.5, tol=1e-12, max_iter=1)
    assert isinstance(info.value.last_iterate, Plan)
    assert info.value.residual == pytest.approx(0.5)


def test_nu_must_be_positive(jump_problem):
    """nu <= 0 is refused."""
    with pytest.raises(NonpositiveNu):
        solve_fixed_point(0.0, jump_problem)
    solution = solve_plan(initial_plan(jump_problem), jump_problem)
    with pytest.raises(NonpositiveNu):
        candidate_plan(-1.0, solution.qstar, jump_problem)


def test_capital_must_be_positive(jump_problem):
    """x <= 0 is refused."""
    with pytest.raises(NonpositiveCapital):
        jump_problem.with_capital(0.0)


def test_optimal_plan_meets_budget_and_stationarity(jump_problem):
    """|f(nu) - x| and the first-order residual are both tiny."""
    optimal = solve_optimal_plan(jump_problem)
    assert abs(optimal.budget - jump_problem.capital) <= 1e-8
    assert optimal.stationarity <= 1e-8
    assert optimal.nu > 0


def test_lagrangian_dominance(jump_problem):
    """No perturbed plan beats the optimum in the Lagrangian."""
    optimal = solve_optimal_plan(jump_problem)
    best = lagrangian(optimal.plan, jump_problem, optimal.nu)
    rng = np.random.default_rng(2)
    lattice = jump_problem.lattice
    for _ in range(100):
        factors = [rng.uniform(0.8, 1.2, size=lattice.node_count(k)) for k in range(4)]
        consumption = optimal.plan.consumption
        perturbed = Plan(
            AdaptedProcess(tuple(c * f for c, f in zip(consumption.values, factors))),
            optimal.plan.terminal * rng.uniform(0.8, 1.2, size=lattice.leaf_count),
        )
        assert lagrangian(perturbed, jump_problem, optimal.nu) <= best + 1e-9


def test_lagrangian_without_multiplier(jump_problem):
    """nu = 0 gives V_0 and negative nu is refused."""
    plan = initial_plan(jump_problem)
    value = solve_plan(plan, jump_problem).initial_value
    assert lagrangian(plan, jump_problem, 0.0) == pytest.approx(value)
    with pytest.raises(NonpositiveNu):
        lagrangian(plan, jump_problem, -0.1)


def test_gateaux_consistency_at_optimum(jump_problem):
    """Directional derivative of V_0 equals nu times the budget change in 20 random directions."""
    optimal = solve_optimal_plan(jump_problem)
    rng = np.random.default_rng(5)
    lattice = jump_problem.lattice
    directions = []
    for i in range(20):
        low, high = (1.0, 1.2) if i % 2 == 0 else (0.8, 1.0)
        consumption = AdaptedProcess(
            tuple(
                c * rng.uniform(low, high, size=c.size)
                for c in optimal.plan.consumption.values
            )
        )
        terminal = optimal.plan.terminal * rng.uniform(low, high, size=lattice.leaf_count)
        directions.append(Plan(consumption, terminal))
    assert gateaux_consistency(optimal, jump_problem, directions) <= 1e-6


def test_value_curve_increasing_and_concave(jump_problem):
    """u(x) grows with capital at a decreasing rate."""
    values = value_curve(jump_problem, [0.5, 1.0, 1.5])
    assert values[0] < values[1] < values[2]
    assert values[1] >= 0.5 * (values[0] + values[2])


@pytest.fixture
def two_leaf_problem():
    """One Bernoulli step without discounting; at nu = 1 the fixed point is c = psi = 1."""
    lattice = build_lattice(TimeGrid(1.0, 1), 1, 0)
    return BudgetProblem(
        capital=2.0,
        pricing=NodeMeasure.base(lattice),
        discount=zero_discount(lattice),
        utility=UtilitySpec.parse("power:0.5"),
        terminal_utility=UtilitySpec.parse("power:0.5"),
    )


def _lopsided_start() -> Plan:
    consumption = AdaptedProcess((np.array([1.0]), np.array([1.0, 1.0])))
    return Plan(consumption, np.array([1.2, 0.8]))


def test_full_step_oscillates_where_half_step_settles(two_leaf_problem):
    """Without damping the iteration flips between the leaves; rho = 0.5 settles at psi = 1."""
    plain = {"start": _lopsided_start(), "history": 0, "adaptive": False}
    with pytest.raises(NoConvergence) as info:
        solve_fixed_point(1.0, two_leaf_problem, damping=1.0, max_iter=50, **plain)
    assert info.value.residual > 0.1
    result = solve_fixed_point(1.0, two_leaf_problem, damping=0.5, max_iter=200, **plain)
    assert result.plan.terminal == pytest.approx(np.ones(2), abs=1e-9)
    assert result.plan.consumption[0] == pytest.approx(np.ones(1))


def test_adaptive_damping_rescues_full_step(two_leaf_problem):
    """Halving the weight when the residual grows turns rho = 1 into a converging run."""
    result = solve_fixed_point(
        1.0, two_leaf_problem, damping=1.0, start=_lopsided_start(), history=0
    )
    assert result.residual <= 1e-10
    assert result.plan.terminal == pytest.approx(np.ones(2), abs=1e-9)


def test_mixing_matches_plain_fixed_point(jump_problem):
    """Anderson mixing lands on the same plan as the plain damped iteration, in fewer steps."""
    mixed = solve_fixed_point(2.0, jump_problem)
    plain = solve_fixed_point(2.0, jump_problem, damping=0.25, history=0, max_iter=2000)
    assert mixed.iterations < plain.iterations
    for a, b in zip(mixed.plan.consumption.values[:-1], plain.plan.consumption.values[:-1]):
        assert a == pytest.approx(b, rel=1e-8)
    assert mixed.plan.terminal == pytest.approx(plain.plan.terminal, rel=1e-8)


def test_mixing_history_must_be_nonnegative(jump_problem):
    """A negative mixing depth is a configuration error."""
    with pytest.raises(ConfigurationError, match="mixing history"):
        solve_fixed_point(1.0, jump_problem, history=-1)


def test_warm_start_reuses_nearest_measure(single_path):
    """After the first nu every evaluation starts from the nearest solved measure."""
    nu, result, evaluations = solve_nu(single_path.with_capital(3.0))
    assert nu == pytest.approx(1.0 / 3.0, rel=1e-10)
    assert result.iterations == 1
    assert evaluations > 3


def test_budget_gap_is_an_error(single_path):
    """A multiplier outside the budget tolerance is raised, not returned."""
    with patch("robustbsde.max_principle.bisect", return_value=0.3):
        with pytest.raises(BudgetNotMet, match="budget gap"):
            solve_nu(single_path.with_capital(3.0))


def test_non_monotone_budget_map_is_an_error(single_path):
    """f(nu) leaving its bracket during bisection raises BracketFailure."""
    real_budget = max_principle.budget

    def bumped(plan, problem):
        if plan.consumption[0][0] == pytest.approx(1.0 / 0.375):
            return 10.0
        return real_budget(plan, problem)

    with patch.object(max_principle, "budget", side_effect=bumped):
        with pytest.raises(BracketFailure, match="not decreasing"):
            solve_nu(single_path.with_capital(3.0))


def test_log_multiplier_scales_with_capital(log_problem):
    """With log utility Z* does not depend on nu, so doubling x doubles 1/nu."""
    first = solve_optimal_plan(log_problem)
    second = solve_optimal_plan(log_problem.with_capital(2.0 * log_problem.capital))
    assert (1.0 / second.nu) == pytest.approx(2.0 / first.nu, rel=1e-7)
    assert second.value > first.value
