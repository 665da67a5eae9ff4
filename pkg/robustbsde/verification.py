"""The ``verify`` check suite: solver output against brute-force and structural oracles.

Each check receives its own generator seeded from (seed, check index) and the
results come back in submission order, so the report does not depend on the
number of worker threads.
"""

import dataclasses
import logging
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from robustbsde import bsdej
from robustbsde.bsdej import (
    BsdeSolution,
    Scheme,
    closed_form_delta0,
    comparison_check,
    gateaux_derivative,
    k_process,
    one_step_entropic,
    recursion_residuals,
    verify_K_martingale,
)
from robustbsde.errors import TreeTooLarge
from robustbsde.lattice import AdaptedProcess, DiscountSpec, Lattice, zero_discount
from robustbsde.measure import CriterionSpec, EntropyForm, criterion_gamma
from robustbsde.oracle import (
    MAX_SIMPLEX_DIMENSION,
    MAX_TREE_STEPS,
    concavity_check,
    dv_onestep_grid,
    joint_random_search,
    tree_min_grid,
)
from robustbsde.preferences import Plan, UtilitySpec, utility_inputs
from robustbsde.reports import write_table

logger = logging.getLogger(__name__)

EXACT_TOL = 1e-10
ORDER_TOL = 1e-12
CONCAVITY_THETAS = (0.25, 0.5, 0.75)
REPORT_HEADER = ["check", "property", "oracle", "solver", "gap", "passed"]

Solver = Callable[..., BsdeSolution]


@dataclass(frozen=True)
class CheckResult:
    check: str
    property: str
    oracle: float
    solver: float
    gap: float
    passed: bool

    def row(self) -> list[object]:
        return [self.check, self.property, self.oracle, self.solver, self.gap, self.passed]


@dataclass(frozen=True, eq=False)
class SuiteContext:
    lattice: Lattice
    criterion: CriterionSpec
    grid_step: float
    trials: int
    samples: int
    solve: Solver


def corrupted_solver(*args, **kwargs) -> BsdeSolution:
    """Negative control: the true solution with Y_0 shifted up by 0.01."""
    solution = bsdej.solve_bsdej(*args, **kwargs)
    values = (solution.values[0] + 0.01, *solution.values[1:])
    return dataclasses.replace(solution, values=values)


def _solve_spec(ctx: SuiteContext, spec: CriterionSpec, scheme: Scheme) -> BsdeSolution:
    beta = spec.beta
    return ctx.solve(
        ctx.lattice, spec.cost.map(lambda v: v / beta), spec.terminal / beta, spec.discount, scheme
    )


def _random_inputs(
    lattice: Lattice, rng: np.random.Generator, scale: float = 1.0
) -> tuple[AdaptedProcess, np.ndarray]:
    cost = AdaptedProcess(
        tuple(scale * rng.normal(size=lattice.node_count(k)) for k in range(lattice.steps + 1))
    )
    return cost, scale * rng.normal(size=lattice.leaf_count)


def check_onestep(ctx: SuiteContext, rng: np.random.Generator) -> CheckResult:
    p = np.array([0.5, 0.5])
    x = np.array([0.0, 1.0])
    _, oracle = dv_onestep_grid(p, x, 1e-4)
    solver = float(one_step_entropic(x, p, 0.0, 0.0))
    gap = abs(solver - oracle)
    return CheckResult(
        "onestep_dv", "one-step Donsker-Varadhan minimum", oracle, solver, gap, gap <= 1e-6
    )


def check_tree_duality(ctx: SuiteContext, rng: np.random.Generator) -> CheckResult:
    _, oracle = tree_min_grid(ctx.criterion, ctx.lattice, ctx.grid_step)
    solver = ctx.criterion.beta * _solve_spec(ctx, ctx.criterion, Scheme.DP).initial_value
    gap = abs(solver - oracle)
    return CheckResult(
        "tree_duality", "Y_0 = min_Q Gamma(Q) (grid search)", oracle, solver, gap,
        gap <= 10 * ctx.grid_step,
    )


def check_gamma_at_qstar(ctx: SuiteContext, rng: np.random.Generator) -> CheckResult:
    solution = _solve_spec(ctx, ctx.criterion, Scheme.DP)
    oracle = criterion_gamma(ctx.criterion, solution.qstar, ctx.lattice, EntropyForm.STEPWISE_KL)
    solver = ctx.criterion.beta * solution.initial_value
    gap = abs(solver - oracle)
    return CheckResult("gamma_at_qstar", "Gamma(Q*) = Y_0", oracle, solver, gap, gap <= EXACT_TOL)


def check_random_search(ctx: SuiteContext, rng: np.random.Generator) -> CheckResult:
    _, oracle = joint_random_search(ctx.criterion, ctx.lattice, ctx.samples, rng)
    solver = ctx.criterion.beta * _solve_spec(ctx, ctx.criterion, Scheme.DP).initial_value
    gap = solver - oracle
    return CheckResult(
        "random_search", "Gamma(Q) >= Y_0 for sampled Q", oracle, solver, gap, gap <= EXACT_TOL
    )


def check_recursion(ctx: SuiteContext, rng: np.random.Generator) -> CheckResult:
    solution = _solve_spec(ctx, ctx.criterion, Scheme.RECURSION)
    residual = recursion_residuals(solution)
    return CheckResult(
        "recursion_exact", "recursion identity, all grid pairs", 0.0, residual, residual,
        residual <= EXACT_TOL,
    )


def check_k_martingale(ctx: SuiteContext, rng: np.random.Generator) -> CheckResult:
    solution = _solve_spec(ctx, ctx.criterion, Scheme.RECURSION)
    residual = verify_K_martingale(solution)
    root = float(k_process(solution).values[0][0])
    return CheckResult(
        "k_martingale", "K is a P-martingale", float(np.exp(-solution.initial_value)), root,
        residual, residual <= EXACT_TOL,
    )


def check_closed_form(ctx: SuiteContext, rng: np.random.Generator) -> CheckResult:
    lattice = ctx.lattice
    cost, terminal = ctx.criterion.cost, ctx.criterion.terminal
    solution = ctx.solve(lattice, cost, terminal, zero_discount(lattice), Scheme.DP)
    closed = closed_form_delta0(lattice, cost, terminal)
    gap = max(
        float(np.max(np.abs(a - b))) for a, b in zip(solution.values, closed.values)
    )
    return CheckResult(
        "closed_form_delta0", "delta = 0 entropic closed form", float(closed[0][0]),
        solution.initial_value, gap, gap <= ORDER_TOL,
    )


def check_translation(ctx: SuiteContext, rng: np.random.Generator) -> CheckResult:
    lattice = ctx.lattice
    zero = AdaptedProcess(tuple(np.zeros(lattice.node_count(k)) for k in range(lattice.steps + 1)))
    shift = float(rng.uniform(0.5, 2.0))
    terminal = rng.normal(size=lattice.leaf_count)
    base = ctx.solve(lattice, zero, terminal, zero_discount(lattice), Scheme.DP)
    moved = ctx.solve(lattice, zero, terminal + shift, zero_discount(lattice), Scheme.DP)
    gap = max(
        float(np.max(np.abs(b - a - shift))) for a, b in zip(base.values, moved.values)
    )
    return CheckResult(
        "translation", "cash invariance Y(U + m) = Y(U) + m", base.initial_value + shift,
        moved.initial_value, gap, gap <= ORDER_TOL,
    )


def check_comparison(ctx: SuiteContext, rng: np.random.Generator) -> CheckResult:
    lattice, discount = ctx.lattice, ctx.criterion.discount
    worst_order, worst_bound = -np.inf, -np.inf
    for _ in range(ctx.trials):
        cost, terminal = _random_inputs(lattice, rng)
        bump_cost, bump_terminal = _random_inputs(lattice, rng)
        higher = AdaptedProcess(
            tuple(a + np.abs(b) for a, b in zip(cost.values, bump_cost.values))
        )
        first = ctx.solve(lattice, cost, terminal, discount, Scheme.DP)
        second = ctx.solve(lattice, higher, terminal + np.abs(bump_terminal), discount, Scheme.DP)
        report = comparison_check(first, second, lattice, ORDER_TOL)
        worst_order = max(worst_order, report.max_order_violation)
        worst_bound = max(worst_bound, report.bound_gap)
    gap = max(worst_order, worst_bound)
    return CheckResult(
        "comparison", "ordered inputs give ordered values and the Q*-bound", 0.0, worst_order,
        gap, worst_order <= ORDER_TOL and worst_bound <= EXACT_TOL,
    )


def check_concavity(ctx: SuiteContext, rng: np.random.Generator) -> CheckResult:
    lattice, discount = ctx.lattice, ctx.criterion.discount
    worst = np.inf
    for _ in range(ctx.trials):
        first = CriterionSpec(*_random_inputs(lattice, rng), discount=discount)
        second = CriterionSpec(*_random_inputs(lattice, rng), discount=discount)
        report = concavity_check(first, second, CONCAVITY_THETAS, lattice, Scheme.DP)
        worst = min(worst, report.worst_gap)
    return CheckResult(
        "concavity", "value is concave in (U, terminal)", 0.0, worst, -worst, worst >= -ORDER_TOL
    )


def _random_plan(lattice: Lattice, rng: np.random.Generator) -> Plan:
    consumption = AdaptedProcess(
        tuple(rng.uniform(0.5, 1.5, size=lattice.node_count(k)) for k in range(lattice.steps + 1))
    )
    return Plan(consumption, rng.uniform(0.5, 1.5, size=lattice.leaf_count))


def _plan_value(
    ctx: SuiteContext, plan: Plan, utility: UtilitySpec, discount: DiscountSpec
) -> BsdeSolution:
    cost, terminal = utility_inputs(plan, utility, utility)
    return ctx.solve(ctx.lattice, cost, terminal, discount, Scheme.DP)


def check_gateaux(ctx: SuiteContext, rng: np.random.Generator) -> CheckResult:
    """Finite differences at eps = 1e-2 and 1e-3 against the exact directional derivative."""
    lattice, discount = ctx.lattice, ctx.criterion.discount
    utility = UtilitySpec.parse("log")
    worst_rel, worst_ratio = 0.0, np.inf
    for _ in range(ctx.trials):
        plan = _random_plan(lattice, rng)
        bump = _random_plan(lattice, rng)
        raised = zip(plan.consumption.values, bump.consumption.values)
        other = Plan(
            AdaptedProcess(tuple(a + b for a, b in raised)), plan.terminal + bump.terminal
        )
        base = _plan_value(ctx, plan, utility, discount)
        exact = float(gateaux_derivative(base, plan, other, utility, utility)[0][0])
        errors = []
        for eps in (1e-2, 1e-3):
            moved = _plan_value(ctx, plan.blend(other, eps), utility, discount)
            errors.append(abs((moved.initial_value - base.initial_value) / eps - exact))
        worst_rel = max(worst_rel, errors[1] / max(abs(exact), 1e-300))
        worst_ratio = min(worst_ratio, errors[0] / max(errors[1], 1e-300))
    return CheckResult(
        "gateaux_fd", "directional derivative vs finite differences", 5.0, worst_ratio,
        worst_rel, worst_ratio >= 5.0 and worst_rel <= 1e-2,
    )


CHECKS: tuple[Callable[[SuiteContext, np.random.Generator], CheckResult], ...] = (
    check_onestep,
    check_tree_duality,
    check_gamma_at_qstar,
    check_random_search,
    check_recursion,
    check_k_martingale,
    check_closed_form,
    check_translation,
    check_comparison,
    check_concavity,
    check_gateaux,
)


def run_suite(
    lattice: Lattice,
    criterion: CriterionSpec,
    grid_step: float = 0.01,
    trials: int = 20,
    samples: int = 2000,
    seed: int = 0,
    threads: int = 1,
    corrupt: bool = False,
) -> list[CheckResult]:
    """Run every check; refuses trees the grid oracle cannot search."""
    if lattice.steps > MAX_TREE_STEPS or lattice.branching > MAX_SIMPLEX_DIMENSION:
        raise TreeTooLarge(
            f"verify needs K <= {MAX_TREE_STEPS} and <= {MAX_SIMPLEX_DIMENSION} children per node; "
            f"got K={lattice.steps}, B={lattice.branching}. Reduce steps or dimensions."
        )
    solve = corrupted_solver if corrupt else bsdej.solve_bsdej
    ctx = SuiteContext(lattice, criterion, grid_step, trials, samples, solve)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [
            pool.submit(check, ctx, np.random.default_rng([seed, index]))
            for index, check in enumerate(CHECKS)
        ]
        results = [f.result() for f in futures]
    for result in results:
        level = logging.INFO if result.passed else logging.WARNING
        status = "ok" if result.passed else "FAILED"
        logger.log(level, f"{result.check}: gap {result.gap:.3g} ({status})")
    return results


def write_report(path: Path, results: list[CheckResult]) -> Path:
    return write_table(path, REPORT_HEADER, (r.row() for r in results))
