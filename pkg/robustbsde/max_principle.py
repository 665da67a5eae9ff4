"""Outer maximization over plans (c, ψ) under the budget E^P̃[sum c dt + ψ] <= x.

The optimal plan satisfies U'(c) = ν Z̃ / (S^δ Z*) where Z* is the density of
the worst-case measure for that same plan, so plan and BSDE are solved jointly
by damped fixed-point iteration, and ν is found by bisection on the budget.
"""

import dataclasses
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy.optimize import bisect

from robustbsde.bsdej import BsdeSolution, Scheme, gateaux_derivative, solve_bsdej
from robustbsde.errors import (
    BracketFailure,
    BudgetNotMet,
    ConfigurationError,
    InvalidMeasure,
    NoConvergence,
    NonpositiveCapital,
    NonpositiveNu,
)
from robustbsde.lattice import AdaptedProcess, DiscountSpec, Lattice
from robustbsde.measure import NodeMeasure
from robustbsde.preferences import Plan, UtilitySpec, utility_inputs

logger = logging.getLogger(__name__)

DEFAULT_DAMPING = 0.5
DEFAULT_FIXED_POINT_TOL = 1e-10
DEFAULT_MAX_ITER = 500
DEFAULT_BUDGET_TOL = 1e-8
DEFAULT_MIXING_HISTORY = 5
MIN_DAMPING = 1.0 / 64
MAX_LOG_PLAN = 700.0
MAX_BRACKET_STEPS = 60


@dataclass(frozen=True, eq=False)
class BudgetProblem:
    """Capital, pricing measure P̃, discounting and the two utilities."""

    capital: float
    pricing: NodeMeasure
    discount: DiscountSpec
    utility: UtilitySpec
    terminal_utility: UtilitySpec

    def __post_init__(self):
        if not (math.isfinite(self.capital) and self.capital > 0):
            raise NonpositiveCapital(f"initial capital must be positive, got {self.capital}")
        if not self.pricing.is_equivalent():
            raise InvalidMeasure("pricing measure must give every child positive weight")
        if self.utility.is_none:
            raise ConfigurationError("the running utility cannot be 'none'")
        self.discount.rate.check_on(self.pricing.lattice)

    @property
    def lattice(self) -> Lattice:
        return self.pricing.lattice

    @property
    def consumption_only(self) -> bool:
        return self.terminal_utility.is_none

    def with_capital(self, capital: float) -> "BudgetProblem":
        return dataclasses.replace(self, capital=capital)


@dataclass(frozen=True, eq=False)
class FixedPointResult:
    plan: Plan
    solution: BsdeSolution
    iterations: int
    residual: float


@dataclass(frozen=True, eq=False)
class OptimalPlan:
    """ν⁰ with its fixed point; ``value`` is u(x) = V_0 at the optimal plan."""

    nu: float
    plan: Plan
    solution: BsdeSolution
    budget: float
    stationarity: float
    iterations: int
    evaluations: int

    @property
    def value(self) -> float:
        return self.solution.initial_value


def budget(plan: Plan, problem: BudgetProblem) -> float:
    """X_0 = E^P̃[sum_k c_k dt + ψ]."""
    lattice = problem.lattice
    plan.check_on(lattice)
    paths = problem.pricing.path_probabilities
    running = sum(float(np.dot(paths[k], plan.consumption[k])) for k in range(lattice.steps))
    return running * lattice.step + float(np.dot(paths[-1], plan.terminal))


def _marginal_targets(nu: float, zstar: NodeMeasure, problem: BudgetProblem) -> list[np.ndarray]:
    """ν Z̃ / (S^δ Z*) on every slice."""
    pricing = problem.pricing.densities
    densities = zstar.densities
    factors = problem.discount.factors
    if any(np.any(z <= 0) for z in densities):
        raise InvalidMeasure("the worst-case density must be strictly positive")
    return [nu * pricing[k] / (factors[k] * densities[k]) for k in range(len(densities))]


def candidate_plan(nu: float, zstar: NodeMeasure, problem: BudgetProblem) -> Plan:
    """c = I(ν Z̃ / (S^δ Z*)), ψ = Ī(ν Z̃_T / (S^δ_T Z*_T)) (0 if consumption-only)."""
    if not nu > 0:
        raise NonpositiveNu(f"nu must be positive, got {nu}")
    zstar.lattice.require_same(problem.lattice)
    targets = _marginal_targets(nu, zstar, problem)
    consumption = AdaptedProcess(tuple(problem.utility.inverse_marginal(y) for y in targets))
    if problem.consumption_only:
        terminal = np.zeros(problem.lattice.leaf_count)
    else:
        terminal = problem.terminal_utility.inverse_marginal(targets[-1])
    return Plan(consumption, terminal)


def initial_plan(problem: BudgetProblem) -> Plan:
    """c = x/T and ψ = x (0 in consumption-only mode), scaled so the budget binds."""
    lattice = problem.lattice
    x = problem.capital
    rate = x / lattice.grid.horizon
    consumption = AdaptedProcess(
        tuple(np.full(lattice.node_count(k), rate) for k in range(lattice.steps + 1))
    )
    terminal = np.full(lattice.leaf_count, 0.0 if problem.consumption_only else x)
    plan = Plan(consumption, terminal)
    return plan.scaled(x / budget(plan, problem))


def solve_plan(
    plan: Plan, problem: BudgetProblem, scheme: Scheme | str = Scheme.DP
) -> BsdeSolution:
    """BSDE with inputs (U(c), Ū(ψ))."""
    plan.check_on(problem.lattice)
    cost, terminal = utility_inputs(plan, problem.utility, problem.terminal_utility)
    return solve_bsdej(problem.lattice, cost, terminal, problem.discount, scheme)


def _flatten(plan: Plan) -> np.ndarray:
    return np.concatenate([*plan.consumption.values, plan.terminal])


def _unflatten(vector: np.ndarray, like: Plan) -> Plan:
    sizes = [v.size for v in like.consumption.values]
    parts = np.split(vector, np.cumsum(sizes))
    return Plan(AdaptedProcess(tuple(parts[:-1])), parts[-1])


class _AndersonMixer:
    """Anderson mixing of the plan iteration in log coordinates.

    The first step after every reset is the plain blend (1 - ρ) c + ρ c'. Later
    steps combine the last ``depth`` iterates by least squares on their
    log-residuals ln c' - ln c; entries that are zero (ψ in consumption-only
    mode) always take the plain blend.
    """

    def __init__(self, depth: int):
        if depth < 0:
            raise ConfigurationError(f"mixing history must be >= 0, got {depth}")
        self.depth = depth
        self.reset()

    def reset(self) -> None:
        self._mask: np.ndarray | None = None
        self._last: tuple[np.ndarray, np.ndarray] | None = None
        self._du: list[np.ndarray] = []
        self._df: list[np.ndarray] = []

    def step(self, plan: Plan, candidate: Plan, damping: float) -> Plan:
        blended = plan.blend(candidate, damping)
        if self.depth == 0:
            return blended
        x, g = _flatten(plan), _flatten(candidate)
        mask = (x > 0) & (g > 0)
        if self._mask is None or not np.array_equal(mask, self._mask):
            self.reset()
            self._mask = mask
        u = np.log(x[mask])
        f = np.log(g[mask]) - u
        if self._last is not None:
            self._du.append(u - self._last[0])
            self._df.append(f - self._last[1])
            del self._du[: -self.depth], self._df[: -self.depth]
        self._last = (u, f)
        if not self._du:
            return blended

        du, df = np.column_stack(self._du), np.column_stack(self._df)
        weights = np.linalg.lstsq(df, f, rcond=None)[0]
        mixed = u + damping * f - (du + damping * df) @ weights
        if not np.all(np.isfinite(mixed)) or np.max(np.abs(mixed)) > MAX_LOG_PLAN:
            logger.debug("Anderson step left the representable range; restarting history")
            self.reset()
            return blended
        vector = _flatten(blended)
        vector[mask] = np.exp(mixed)
        return _unflatten(vector, plan)


def solve_fixed_point(
    nu: float,
    problem: BudgetProblem,
    damping: float = DEFAULT_DAMPING,
    tol: float = DEFAULT_FIXED_POINT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    scheme: Scheme | str = Scheme.DP,
    start: Plan | None = None,
    history: int = DEFAULT_MIXING_HISTORY,
    adaptive: bool = True,
) -> FixedPointResult:
    """Alternate BSDE solve and candidate plan, blending with weight ``damping``.

    With ``history`` > 0 the blend is Anderson-mixed with earlier iterates. With
    ``adaptive`` the weight halves (down to MIN_DAMPING) and the mixing history
    restarts whenever the residual grows. Stops when the sup-node relative change
    between the plan and its candidate is at most ``tol``; the returned plan is
    the one the solution was computed for.
    """
    if not nu > 0:
        raise NonpositiveNu(f"nu must be positive, got {nu}")
    if not (0.0 < damping <= 1.0):
        raise ConfigurationError(f"damping must lie in (0, 1], got {damping}")
    if not tol > 0 or max_iter < 1:
        raise ConfigurationError("tolerance must be positive and max_iter >= 1")

    plan = initial_plan(problem) if start is None else start
    mixer = _AndersonMixer(history)
    weight = damping
    change = previous = math.inf
    for iteration in range(1, max_iter + 1):
        solution = solve_plan(plan, problem, scheme)
        candidate = candidate_plan(nu, solution.qstar, problem)
        change = plan.relative_change(candidate)
        logger.debug(f"Fixed point nu={nu:.12g} iteration {iteration}: change {change:.3g}")
        if change <= tol:
            return FixedPointResult(plan, solution, iteration, change)
        if adaptive and change > previous:
            weight = max(weight / 2.0, MIN_DAMPING)
            mixer.reset()
            logger.debug(f"Residual grew; damping now {weight:.3g}")
        previous = change
        plan = mixer.step(plan, candidate, weight)
    raise NoConvergence(
        f"plan/BSDE iteration did not settle for nu={nu:.6g} after {max_iter} iterations "
        f"(last relative change {change:.3g})",
        last_iterate=plan,
        residual=change,
    )


class _BudgetMap:
    """f(ν) = X_0 of the fixed-point plan for ν.

    Each new ν starts from the best response to the worst-case measure of the
    closest ν solved so far.
    """

    def __init__(
        self,
        problem: BudgetProblem,
        damping: float,
        tol: float,
        max_iter: int,
        scheme: Scheme,
        history: int = DEFAULT_MIXING_HISTORY,
        adaptive: bool = True,
    ):
        self.problem = problem
        self.damping = damping
        self.tol = tol
        self.max_iter = max_iter
        self.scheme = scheme
        self.history = history
        self.adaptive = adaptive
        self.results: dict[float, FixedPointResult] = {}

    def _warm_start(self, nu: float) -> Plan | None:
        if not self.results:
            return None
        nearest = min(self.results, key=lambda solved: abs(math.log(solved / nu)))
        return candidate_plan(nu, self.results[nearest].solution.qstar, self.problem)

    def __call__(self, nu: float) -> float:
        if nu not in self.results:
            self.results[nu] = solve_fixed_point(
                nu,
                self.problem,
                self.damping,
                self.tol,
                self.max_iter,
                self.scheme,
                start=self._warm_start(nu),
                history=self.history,
                adaptive=self.adaptive,
            )
        return budget(self.results[nu].plan, self.problem)


def _bracket(f: _BudgetMap, target: float, tol: float) -> tuple[float, float] | float:
    """Double or halve from ν = 1 until f(ν) - x changes sign; a trial within tol is returned."""
    nu = 1.0
    value = f(nu)
    if abs(value - target) <= tol:
        return nu
    factor = 2.0 if value > target else 0.5
    for _ in range(MAX_BRACKET_STEPS):
        nxt = nu * factor
        nxt_value = f(nxt)
        decreasing = nxt_value < value if factor > 1 else nxt_value > value
        if not decreasing:
            raise BracketFailure(
                f"f(nu) is not strictly decreasing: f({nu:.6g}) = {value:.12g}, "
                f"f({nxt:.6g}) = {nxt_value:.12g}"
            )
        if abs(nxt_value - target) <= tol:
            return nxt
        if (nxt_value - target) * (value - target) < 0:
            return (min(nu, nxt), max(nu, nxt))
        nu, value = nxt, nxt_value
    raise BracketFailure(f"no sign change of f(nu) - x within {MAX_BRACKET_STEPS} steps")


def solve_nu(
    problem: BudgetProblem,
    tol: float = DEFAULT_BUDGET_TOL,
    damping: float = DEFAULT_DAMPING,
    fixed_point_tol: float = DEFAULT_FIXED_POINT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    scheme: Scheme | str = Scheme.DP,
    history: int = DEFAULT_MIXING_HISTORY,
    adaptive: bool = True,
) -> tuple[float, FixedPointResult, int]:
    """ν⁰ with |f(ν⁰) - x| <= tol, its fixed point and the number of f evaluations.

    Raises BracketFailure when f is not decreasing on the bracket and
    BudgetNotMet when the bisection ends outside the budget tolerance.
    """
    x = problem.capital
    f = _BudgetMap(
        problem, damping, fixed_point_tol, max_iter, Scheme(scheme), history, adaptive
    )
    found = _bracket(f, x, tol)
    if isinstance(found, float):
        nu = found
    else:
        lo, hi = found
        logger.info(f"Bracketed nu in [{lo:.6g}, {hi:.6g}]")
        flo, fhi = f(lo), f(hi)

        def excess(candidate: float) -> float:
            value = f(candidate)
            if not fhi <= value <= flo:
                raise BracketFailure(
                    f"f(nu) is not decreasing on [{lo:.6g}, {hi:.6g}]: "
                    f"f({candidate:.12g}) = {value:.12g} lies outside [{fhi:.12g}, {flo:.12g}]"
                )
            return value - x

        nu = bisect(excess, lo, hi, xtol=1e-14, maxiter=200)
    gap = abs(f(nu) - x)
    if gap > tol:
        raise BudgetNotMet(f"budget gap {gap:.3g} at nu={nu:.12g} exceeds tolerance {tol:.3g}")
    return nu, f.results[nu], len(f.results)


def verify_stationarity(
    plan: Plan, solution: BsdeSolution, nu: float, problem: BudgetProblem
) -> float:
    """max |U'(c) S^δ Z* / (ν Z̃) - 1| over nodes, plus the terminal analogue if there is one."""
    targets = _marginal_targets(nu, solution.qstar, problem)
    lattice = problem.lattice
    worst = max(
        float(np.max(np.abs(problem.utility.marginal(plan.consumption[k]) / targets[k] - 1.0)))
        for k in range(lattice.steps)
    )
    if not problem.consumption_only:
        terminal = problem.terminal_utility.marginal(plan.terminal) / targets[-1] - 1.0
        worst = max(worst, float(np.max(np.abs(terminal))))
    return worst


def lagrangian(
    plan: Plan,
    problem: BudgetProblem,
    nu: float,
    capital: float | None = None,
    scheme: Scheme | str = Scheme.DP,
) -> float:
    """L = V_0 + ν (x - X_0)."""
    if nu < 0:
        raise NonpositiveNu(f"nu must be nonnegative in the Lagrangian, got {nu}")
    x = problem.capital if capital is None else capital
    value = solve_plan(plan, problem, scheme).initial_value
    if nu == 0:
        return value
    return value + nu * (x - budget(plan, problem))


def solve_optimal_plan(
    problem: BudgetProblem,
    tol: float = DEFAULT_BUDGET_TOL,
    damping: float = DEFAULT_DAMPING,
    fixed_point_tol: float = DEFAULT_FIXED_POINT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    scheme: Scheme | str = Scheme.DP,
    history: int = DEFAULT_MIXING_HISTORY,
    adaptive: bool = True,
) -> OptimalPlan:
    nu, result, evaluations = solve_nu(
        problem, tol, damping, fixed_point_tol, max_iter, scheme, history, adaptive
    )
    stationarity = verify_stationarity(result.plan, result.solution, nu, problem)
    optimal = OptimalPlan(
        nu=nu,
        plan=result.plan,
        solution=result.solution,
        budget=budget(result.plan, problem),
        stationarity=stationarity,
        iterations=result.iterations,
        evaluations=evaluations,
    )
    logger.info(
        f"Optimal plan for x={problem.capital:.6g}: nu={nu:.12g}, u(x)={optimal.value:.12g}, "
        f"stationarity {stationarity:.3g}"
    )
    return optimal


def value_curve(problem: BudgetProblem, capitals: Sequence[float], **solver) -> np.ndarray:
    """u(x) for each capital on the grid."""
    return np.array(
        [solve_optimal_plan(problem.with_capital(x), **solver).value for x in capitals]
    )


def gateaux_consistency(
    optimal: OptimalPlan, problem: BudgetProblem, directions: Sequence[Plan]
) -> float:
    """max over directions of |∂V_0 - ν⁰ ∂X_0|, which vanishes at a stationary plan."""
    base_budget = budget(optimal.plan, problem)
    worst = 0.0
    for other in directions:
        derivative = gateaux_derivative(
            optimal.solution,
            optimal.plan,
            other,
            problem.utility,
            problem.terminal_utility,
        )[0][0]
        budget_change = budget(other, problem) - base_budget
        worst = max(worst, abs(float(derivative) - optimal.nu * budget_change))
    return worst
