"""Backward induction for the quadratic-exponential BSDE with jumps.

The quadratic term and the jump driver g(y) = e^{-y} + y - 1 are never formed
explicitly: the exponential transform turns each step into a log-expectation,

    recursion:  Y_k = (U_k dt - ln E[e^{-Y_{k+1}}]) / (1 + delta_k dt)
    dp:         Y_k = U_k dt - ln E[exp(-e^{-delta_k dt} Y_{k+1})]

The first makes the recursion identity exact on the grid, the second makes
Y_0 = min_Q Γ(Q) exact for the stepwise-KL penalty.
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import logsumexp

from robustbsde.errors import (
    ConfigurationError,
    InputsNotOrdered,
    NotComparable,
    SchemeMismatch,
)
from robustbsde.lattice import (
    AdaptedProcess,
    DiscountSpec,
    Lattice,
    leaf_values,
)
from robustbsde.measure import CriterionSpec, NodeMeasure, backward_expectation, beta_reduce
from robustbsde.preferences import Plan, UtilitySpec

logger = logging.getLogger(__name__)

EXACT_TOLERANCE = 1e-10


class Scheme(str, Enum):
    DP = "dp"
    RECURSION = "recursion"


def driver_g(x: np.ndarray | float) -> np.ndarray | float:
    """g(x) = e^{-x} + x - 1."""
    return np.exp(-np.asarray(x, dtype=float)) + x - 1.0


def one_step_entropic(
    child_values: np.ndarray,
    probabilities: np.ndarray,
    u_dt: np.ndarray | float,
    delta_dt: np.ndarray | float,
    scheme: Scheme | str = Scheme.DP,
) -> np.ndarray | float:
    """Entropic one-step operator; vectorized over leading node axis when given 2-D input.

    logsumexp applies the max-shift, so unbounded child values do not overflow.
    """
    scheme = Scheme(scheme)
    values = np.asarray(child_values, dtype=float)
    single = values.ndim == 1
    values = np.atleast_2d(values)
    probs = np.broadcast_to(np.asarray(probabilities, dtype=float), values.shape)
    u_dt = np.broadcast_to(np.asarray(u_dt, dtype=float), values.shape[:1])
    delta_dt = np.broadcast_to(np.asarray(delta_dt, dtype=float), values.shape[:1])
    if np.any(1.0 + delta_dt <= 0):
        raise ConfigurationError("one-step operator needs 1 + delta*dt > 0")
    if scheme is Scheme.RECURSION:
        out = (u_dt - logsumexp(-values, b=probs, axis=1)) / (1.0 + delta_dt)
    else:
        shrink = np.exp(-delta_dt)[:, None]
        out = u_dt - logsumexp(-shrink * values, b=probs, axis=1)
    return float(out[0]) if single else out


@dataclass(frozen=True, eq=False)
class BsdeSolution:
    """(Y, Z, y) per node and the worst-case measure Q*."""

    lattice: Lattice
    scheme: Scheme
    values: tuple[np.ndarray, ...]
    brownian_integrand: tuple[np.ndarray, ...]
    jump_sizes: tuple[np.ndarray, ...]
    qstar: NodeMeasure
    cost: AdaptedProcess
    terminal: np.ndarray
    discount: DiscountSpec

    @property
    def initial_value(self) -> float:
        return float(self.values[0][0])

    def as_process(self) -> AdaptedProcess:
        return AdaptedProcess(self.values)


@dataclass(frozen=True, eq=False)
class KDiagnostic:
    """K_{t_k} = exp(-Y_k + sum_{j<k} (delta_j Y_j - U_j) dt), kept in log form."""

    log_values: tuple[np.ndarray, ...]

    @property
    def values(self) -> tuple[np.ndarray, ...]:
        return tuple(np.exp(v) for v in self.log_values)


@dataclass(frozen=True, eq=False)
class ImpliedTilt:
    """Drift and intensity ratio implied by Q* at one slice, with their continuous-time targets."""

    drift: np.ndarray
    intensity_ratio: np.ndarray
    drift_target: np.ndarray
    ratio_target: np.ndarray

    @property
    def drift_error(self) -> float:
        return float(np.max(np.abs(self.drift - self.drift_target), initial=0.0))

    @property
    def ratio_error(self) -> float:
        return float(np.max(np.abs(self.intensity_ratio - self.ratio_target), initial=0.0))


@dataclass(frozen=True)
class ComparisonReport:
    order_holds: bool
    max_order_violation: float
    bound_gap: float


def tree_integrands(lattice: Lattice, children: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Averaged finite differences: Z from no-jump children, y^i against the no-jump average."""
    count = lattice.sign_count
    no_jump = children[:, :count]
    signs = lattice.child_signs[:count]
    z = no_jump @ signs / (count * math.sqrt(lattice.step))
    by_outcome = children.reshape(children.shape[0], lattice.jump_channels + 1, count).mean(axis=2)
    return z, by_outcome[:, 1:] - by_outcome[:, :1]


def solve_bsdej(
    lattice: Lattice,
    cost: AdaptedProcess,
    terminal: np.ndarray | AdaptedProcess,
    discount: DiscountSpec,
    scheme: Scheme | str = Scheme.DP,
) -> BsdeSolution:
    """Backward induction from Y_K = Ū_T, extracting Z, y and Q* along the way."""
    scheme = Scheme(scheme)
    cost.check_on(lattice)
    discount.rate.check_on(lattice)
    leaves = leaf_values(terminal, lattice)
    dt = lattice.step

    values: list[np.ndarray] = [np.empty(0)] * (lattice.steps + 1)
    integrands: list[np.ndarray] = [np.empty(0)] * lattice.steps
    jump_sizes: list[np.ndarray] = [np.empty(0)] * lattice.steps
    qstar: list[np.ndarray] = [np.empty(0)] * lattice.steps
    values[-1] = leaves
    for k in reversed(range(lattice.steps)):
        children = lattice.child_view(k, values[k + 1])
        probs = lattice.probabilities[k]
        delta_dt = discount.rate[k] * dt
        values[k] = one_step_entropic(children, probs, cost[k] * dt, delta_dt, scheme)
        exponent = children if scheme is Scheme.RECURSION else np.exp(-delta_dt)[:, None] * children
        weights = probs * np.exp(-(exponent - exponent.min(axis=1, keepdims=True)))
        qstar[k] = weights / weights.sum(axis=1, keepdims=True)
        integrands[k], jump_sizes[k] = tree_integrands(lattice, children)

    solution = BsdeSolution(
        lattice=lattice,
        scheme=scheme,
        values=tuple(values),
        brownian_integrand=tuple(integrands),
        jump_sizes=tuple(jump_sizes),
        qstar=NodeMeasure(lattice, tuple(qstar)),
        cost=cost,
        terminal=leaves,
        discount=discount,
    )
    logger.debug(f"Solved BSDEJ ({scheme.value}): Y_0 = {solution.initial_value:.12g}")
    return solution


def solve_criterion(
    spec: CriterionSpec, lattice: Lattice, scheme: Scheme | str = Scheme.DP
) -> BsdeSolution:
    """Solve for the beta-reduced criterion; the value of the original is beta * Y_0."""
    reduced = beta_reduce(spec)
    return solve_bsdej(lattice, reduced.cost, reduced.terminal, reduced.discount, scheme)


def closed_form_delta0(
    lattice: Lattice, cost: AdaptedProcess, terminal: np.ndarray | AdaptedProcess
) -> AdaptedProcess:
    """Y_k = -ln E[exp(-Ū_T - sum_{j>=k} U_j dt) | node], by plain conditional expectations.

    Every leaf carries its whole path exponent Ū_T + sum_j U_j dt, shifted by the
    smallest one, and the cost accrued before slice k is added back afterwards.
    """
    cost.check_on(lattice)
    leaves = leaf_values(terminal, lattice)
    dt = lattice.step
    prefix = [np.zeros(1)]
    for k in range(lattice.steps):
        prefix.append(lattice.spread(k, prefix[k] + cost[k] * dt))
    exponent = leaves + prefix[-1]
    shift = float(np.min(exponent))
    weights = np.exp(-(exponent - shift))
    values: list[np.ndarray] = [np.empty(0)] * (lattice.steps + 1)
    values[-1] = leaves
    for k in reversed(range(lattice.steps)):
        weights = lattice.expectation(k, weights)
        values[k] = shift - np.log(weights) - prefix[k]
    return AdaptedProcess(tuple(values))


def extract_optimal_measure(solution: BsdeSolution) -> NodeMeasure:
    """Q* with q*/p = e^{-x_child} / sum p e^{-x} at every node."""
    return solution.qstar


def implied_tilt(solution: BsdeSolution, time_index: int) -> ImpliedTilt:
    """Drift E^{q*}[ΔW]/dt and intensity ratio q*(jump i)/(lambda^i dt) at each node of a slice."""
    lattice = solution.lattice
    if not 0 <= time_index < lattice.steps:
        raise ConfigurationError(f"time index {time_index} is not an interior slice")
    dt = lattice.step
    q = solution.qstar.probabilities[time_index]
    drift = q @ lattice.brownian_increments / dt
    ratio = (q @ lattice.jump_increments) / (lattice.intensities[time_index] * dt)
    return ImpliedTilt(
        drift=drift,
        intensity_ratio=ratio,
        drift_target=-solution.brownian_integrand[time_index],
        ratio_target=np.exp(-solution.jump_sizes[time_index]),
    )


def _recursion_log_terms(solution: BsdeSolution, k: int) -> np.ndarray:
    rate = solution.discount.rate[k]
    return (rate * solution.values[k] - solution.cost[k]) * solution.lattice.step


def verify_recursion(solution: BsdeSolution, start: int, stop: int) -> float:
    """max |Y_start + ln E[exp(-Y_stop + sum_{start<=j<stop} (delta_j Y_j - U_j) dt) | node]|."""
    lattice = solution.lattice
    if not 0 <= start <= stop <= lattice.steps:
        raise ConfigurationError(f"need 0 <= start <= stop <= K, got ({start}, {stop})")
    if start == stop:
        return 0.0
    log_mass = -solution.values[stop]
    for k in reversed(range(start, stop)):
        log_mass = _recursion_log_terms(solution, k) + logsumexp(
            lattice.child_view(k, log_mass), b=lattice.probabilities[k], axis=1
        )
    return float(np.max(np.abs(solution.values[start] + log_mass)))


def recursion_residuals(solution: BsdeSolution) -> float:
    """Worst verify_recursion residual over every pair start < stop."""
    lattice = solution.lattice
    worst = 0.0
    for stop in range(1, lattice.steps + 1):
        log_mass = -solution.values[stop]
        for k in reversed(range(stop)):
            log_mass = _recursion_log_terms(solution, k) + logsumexp(
                lattice.child_view(k, log_mass), b=lattice.probabilities[k], axis=1
            )
            worst = max(worst, float(np.max(np.abs(solution.values[k] + log_mass))))
    if solution.scheme is Scheme.RECURSION and worst > EXACT_TOLERANCE:
        logger.warning(f"Recursion residual {worst:.3g} exceeds exactness tolerance")
    return worst


def k_process(solution: BsdeSolution) -> KDiagnostic:
    lattice = solution.lattice
    accumulated = np.zeros(1)
    logs = []
    for k in range(lattice.steps + 1):
        logs.append(-solution.values[k] + accumulated)
        if k < lattice.steps:
            accumulated = lattice.spread(k, accumulated + _recursion_log_terms(solution, k))
    return KDiagnostic(tuple(logs))


def verify_K_martingale(solution: BsdeSolution) -> float:
    """max |E[K_{k+1} | node] - K_k| / K_k; exact only for the recursion scheme."""
    if solution.scheme is not Scheme.RECURSION:
        raise SchemeMismatch("the K-martingale identity is exact only for the recursion scheme")
    lattice = solution.lattice
    logs = k_process(solution).log_values
    worst = 0.0
    for k in range(lattice.steps):
        relative = lattice.child_view(k, logs[k + 1]) - logs[k][:, None]
        excess = np.expm1(logsumexp(relative, b=lattice.probabilities[k], axis=1))
        worst = max(worst, float(np.max(np.abs(excess))))
    return worst


def _check_ordered(first: BsdeSolution, second: BsdeSolution) -> None:
    steps = first.lattice.steps
    for k in range(steps):
        if np.any(first.cost[k] > second.cost[k]):
            raise InputsNotOrdered(f"U^1 > U^2 at some node of time index {k}")
    if np.any(first.terminal > second.terminal):
        raise InputsNotOrdered("Ū^1 > Ū^2 at some leaf")


def comparison_check(
    first: BsdeSolution,
    second: BsdeSolution,
    lattice: Lattice | None = None,
    tolerance: float = 1e-12,
) -> ComparisonReport:
    """Pointwise order Y^1 <= Y^2 and the gap of the bound
    S_t Y^12_t <= E^{Q*,2}[sum_{s>=t} S_s U^12_s dt + S_T Ū^12_T | G_t]."""
    lattice = first.lattice if lattice is None else lattice
    lattice.require_same(first.lattice)
    lattice.require_same(second.lattice)
    _check_ordered(first, second)

    violation = max(
        float(np.max(a - b)) for a, b in zip(first.values, second.values)
    )
    factors = second.discount.factors
    dt = lattice.step
    running = [
        factors[k] * (first.cost[k] - second.cost[k]) * dt for k in range(lattice.steps)
    ]
    bound = backward_expectation(
        lattice,
        second.qstar.probabilities,
        factors[-1] * (first.terminal - second.terminal),
        running,
    )
    gap = max(
        float(np.max(factors[k] * (first.values[k] - second.values[k]) - bound[k]))
        for k in range(lattice.steps + 1)
    )
    return ComparisonReport(
        order_holds=violation <= tolerance, max_order_violation=violation, bound_gap=gap
    )


def a_priori_ratio(first: BsdeSolution, second: BsdeSolution) -> float:
    """E^{Q*,2}[sup_t |Y^12_t|^2] / E^{Q*,2}[|Ū^12_T|^2 + sum |U^12|^2 dt]."""
    lattice = first.lattice
    lattice.require_same(second.lattice)
    paths = second.qstar.path_probabilities
    running_max = (first.values[0] - second.values[0]) ** 2
    for k in range(lattice.steps):
        running_max = np.maximum(
            lattice.spread(k, running_max), (first.values[k + 1] - second.values[k + 1]) ** 2
        )
    numerator = float(np.dot(paths[-1], running_max))
    denominator = float(np.dot(paths[-1], (first.terminal - second.terminal) ** 2)) + sum(
        float(np.dot(paths[k], (first.cost[k] - second.cost[k]) ** 2)) * lattice.step
        for k in range(lattice.steps)
    )
    if denominator == 0:
        return 0.0 if numerator == 0 else math.inf
    return numerator / denominator


def gateaux_derivative(
    solution: BsdeSolution,
    plan: Plan,
    other: Plan,
    utility: UtilitySpec,
    terminal_utility: UtilitySpec,
) -> tuple[np.ndarray, ...]:
    """Right derivative of V at ``plan`` toward ``other``, per node, as an expectation under Q*.

    Each step is discounted with the scheme's own factor (e^{-delta dt} for dp, which is
    the S^delta ratio, and 1/(1 + delta dt) for recursion), so the result is the exact
    derivative of the discrete value.
    """
    lattice = solution.lattice
    plan.check_on(lattice)
    other.check_on(lattice)
    if not (other.dominates(plan) or plan.dominates(other)):
        raise NotComparable("plans must be ordered componentwise")
    dt = lattice.step
    rates = [solution.discount.rate[k] * dt for k in range(lattice.steps)]
    if solution.scheme is Scheme.DP:
        factors: Sequence[np.ndarray] = [np.exp(-r) for r in rates]
        running_scale = [np.ones_like(r) for r in rates]
    else:
        factors = [1.0 / (1.0 + r) for r in rates]
        running_scale = factors
    running = [
        running_scale[k]
        * utility.marginal(plan.consumption[k])
        * (other.consumption[k] - plan.consumption[k])
        * dt
        for k in range(lattice.steps)
    ]
    if terminal_utility.is_none:
        final = np.zeros(lattice.leaf_count)
    else:
        final = terminal_utility.marginal(plan.terminal) * (other.terminal - plan.terminal)
    return backward_expectation(lattice, solution.qstar.probabilities, final, running, factors)


def solution_rows(solution: BsdeSolution) -> tuple[list[str], list[list[object]]]:
    """Per-node CSV rows: time_index,node_id,Y,Z_1..Z_p,y_1..y_d,qstar_1..qstar_B."""
    lattice = solution.lattice
    p, d, branching = lattice.brownian_dim, lattice.jump_channels, lattice.branching
    header = (
        ["time_index", "node_id", "Y"]
        + [f"Z_{m + 1}" for m in range(p)]
        + [f"y_{i + 1}" for i in range(d)]
        + [f"qstar_{c + 1}" for c in range(branching)]
    )
    rows: list[list[object]] = []
    for k in range(lattice.steps + 1):
        for node in range(lattice.node_count(k)):
            row: list[object] = [k, node, solution.values[k][node]]
            if k < lattice.steps:
                row += list(solution.brownian_integrand[k][node])
                row += list(solution.jump_sizes[k][node])
                row += list(solution.qstar.probabilities[k][node])
            else:
                row += [""] * (p + d + branching)
            rows.append(row)
    return header, rows
