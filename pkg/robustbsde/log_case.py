"""Logarithmic utility with deterministic coefficients.

Here the value at the optimum splits as V = α ln c* + (1 + α) J with a
deterministic α solving δα = 1 + α', α(T) = 0, and J driven by k = -α/(1 + α).
J is extracted from the full solver and compared against its deterministic
equation; the structure of J (node independence, J(T) = 0) is the check.
"""

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from robustbsde.bsdej import Scheme, tree_integrands
from robustbsde.errors import (
    ConfigurationError,
    NonDeterministicCoefficients,
    NonpositiveNu,
    Singular,
)
from robustbsde.lattice import AdaptedProcess, DiscountSpec, Lattice
from robustbsde.max_principle import BudgetProblem, OptimalPlan, solve_optimal_plan
from robustbsde.measure import GirsanovTilt, NodeMeasure, weighted_measure
from robustbsde.preferences import UtilityKind

logger = logging.getLogger(__name__)


class AlphaMethod(str, Enum):
    """Discretizations of δα = 1 + α', α(T) = 0."""

    EXACT = "exact"
    EULER = "euler"
    LATTICE = "lattice"


def deterministic_rates(discount: DiscountSpec) -> np.ndarray:
    if not discount.is_deterministic:
        raise NonDeterministicCoefficients("the log case needs a deterministic discount rate")
    return discount.deterministic_rates()


def alpha_solve(
    rates: np.ndarray, step: float, method: AlphaMethod | str = AlphaMethod.EXACT
) -> np.ndarray:
    """α on t_0..t_K, integrated backward from α_K = 0 with δ held at δ_k on [t_k, t_{k+1}).

    ``exact`` integrates each step exactly and matches (1 - e^{-δ(T-t)})/δ for constant δ;
    ``euler`` is implicit Euler, whose discrete residual vanishes; ``lattice`` uses
    α_k = dt + e^{-δ_k dt} α_{k+1}, the coefficient that telescopes on the tree.
    """
    method = AlphaMethod(method)
    rates = np.asarray(rates, dtype=float)
    if np.any(rates < 0):
        raise ConfigurationError("discount rates must be nonnegative")
    alpha = np.zeros(rates.size + 1)
    for k in reversed(range(rates.size)):
        rate = rates[k]
        if method is AlphaMethod.EULER:
            alpha[k] = (alpha[k + 1] + step) / (1.0 + rate * step)
        elif method is AlphaMethod.LATTICE:
            alpha[k] = step + np.exp(-rate * step) * alpha[k + 1]
        else:
            weight = -np.expm1(-rate * step) / rate if rate > 0 else step
            alpha[k] = np.exp(-rate * step) * alpha[k + 1] + weight
    return alpha


def alpha_residual(alpha: np.ndarray, rates: np.ndarray, step: float) -> float:
    """max |(α_{k+1} - α_k)/dt - (δ_k α_k - 1)|."""
    alpha = np.asarray(alpha, dtype=float)
    slope = np.diff(alpha) / step
    return float(np.max(np.abs(slope - (np.asarray(rates) * alpha[:-1] - 1.0))))


def kfun(alpha: np.ndarray | float) -> np.ndarray | float:
    """k = -α / (1 + α)."""
    alpha = np.asarray(alpha, dtype=float)
    if np.any(1.0 + alpha == 0):
        raise Singular("k is undefined where 1 + alpha = 0")
    k = -alpha / (1.0 + alpha)
    return float(k) if k.ndim == 0 else k


def pbar_measure(k_values: np.ndarray, tilt: GirsanovTilt, lattice: Lattice) -> NodeMeasure:
    """P̄: Brownian factor (1 - k θ b sqrt(dt)) and jump weight e^{k z}, renormalized per node."""
    tilt.check_on(lattice)
    k_values = np.asarray(k_values, dtype=float)
    return weighted_measure(
        lattice,
        [-k * tilt.theta for k in k_values[: lattice.steps]],
        [np.exp(k * tilt.z) for k in k_values[: lattice.steps]],
    )


def extract_J(values: AdaptedProcess, cstar: AdaptedProcess, alpha: np.ndarray) -> AdaptedProcess:
    """J = (V - α ln c*) / (1 + α), slice by slice."""
    alpha = np.asarray(alpha, dtype=float)
    if alpha.size != len(values.values):
        raise ConfigurationError(f"alpha has {alpha.size} points, V has {len(values.values)}")
    if np.any(1.0 + alpha == 0):
        raise Singular("J is undefined where 1 + alpha = 0")
    if any(np.any(c <= 0) for c in cstar.values):
        raise ConfigurationError("c* must be strictly positive")
    return AdaptedProcess(
        tuple(
            (v - a * np.log(c)) / (1.0 + a)
            for v, c, a in zip(values.values, cstar.values, alpha)
        )
    )


def reconstruction_residual(
    values: AdaptedProcess, cstar: AdaptedProcess, alpha: np.ndarray, j: AdaptedProcess
) -> float:
    """max |V - α ln c* - (1 + α) J|."""
    return max(
        float(np.max(np.abs(v - a * np.log(c) - (1.0 + a) * jv)))
        for v, c, a, jv in zip(values.values, cstar.values, alpha, j.values)
    )


def solve_J_ode(
    rates: np.ndarray,
    intensities: np.ndarray,
    z: np.ndarray,
    theta: np.ndarray,
    step: float,
    alpha: np.ndarray,
) -> np.ndarray:
    """Backward implicit Euler for J' = (1+δ)(1+k) J - kδ + k(1+k)|θ|²/2
    + sum_i (k(e^{-z_i} - 1) + e^{k z_i} - 1) λ_i, J(T) = 0."""
    rates = np.asarray(rates, dtype=float)
    lam = np.asarray(intensities, dtype=float)
    z = np.asarray(z, dtype=float)
    theta_sq = float(np.sum(np.square(theta)))
    k_values = np.asarray(kfun(alpha), dtype=float)
    j = np.zeros(rates.size + 1)
    for n in reversed(range(rates.size)):
        k = k_values[n]
        slope = (1.0 + rates[n]) * (1.0 + k)
        source = (
            -k * rates[n]
            + 0.5 * k * (1.0 + k) * theta_sq
            + float(np.sum((k * np.expm1(-z) + np.expm1(k * z)) * lam))
        )
        j[n] = (j[n + 1] - step * source) / (1.0 + step * slope)
    return j


def cstar_forward(
    nu: float, zstar: NodeMeasure, pricing: NodeMeasure, discount: DiscountSpec
) -> AdaptedProcess:
    """c* = S^δ Z* / (ν Z̃)."""
    if not nu > 0:
        raise NonpositiveNu(f"nu must be positive, got {nu}")
    zstar.lattice.require_same(pricing.lattice)
    return AdaptedProcess(
        tuple(
            s * q / (nu * p)
            for s, q, p in zip(discount.factors, zstar.densities, pricing.densities)
        )
    )


@dataclass(frozen=True)
class SliceSpread:
    time_index: int
    mean: float
    spread: float
    std: float


def j_spread(j: AdaptedProcess, lattice: Lattice) -> list[SliceSpread]:
    """Per-slice max-min spread and P-weighted standard deviation of J."""
    paths = lattice.path_probabilities()
    rows = []
    for k, values in enumerate(j.values):
        mean = float(np.dot(paths[k], values))
        variance = float(np.dot(paths[k], np.square(values - mean)))
        rows.append(SliceSpread(k, mean, float(np.ptp(values)), float(np.sqrt(max(variance, 0.0)))))
    return rows


@dataclass(frozen=True, eq=False)
class LogCaseSolution:
    alpha: np.ndarray
    k: np.ndarray
    j: AdaptedProcess
    jump_sizes: tuple[np.ndarray, ...]
    residual: float
    pbar: NodeMeasure
    cstar: AdaptedProcess
    j_ode: np.ndarray
    optimal: OptimalPlan

    @property
    def beta_process(self) -> AdaptedProcess:
        """β_t = (1 + α(t)) J_t."""
        return AdaptedProcess(tuple((1.0 + a) * v for a, v in zip(self.alpha, self.j.values)))


def _constant_intensities(lattice: Lattice) -> np.ndarray:
    if lattice.jump_channels == 0:
        return np.zeros(0)
    first = lattice.intensities[0][0]
    if any(np.any(lam != first) for lam in lattice.intensities):
        raise NonDeterministicCoefficients("the log case needs constant intensities")
    return first


def solve_log_case(
    problem: BudgetProblem,
    tilt: GirsanovTilt,
    alpha_method: AlphaMethod | str = AlphaMethod.LATTICE,
    scheme: Scheme | str = Scheme.DP,
    **solver,
) -> LogCaseSolution:
    """Solve the optimal plan, then split its value into α ln c* + (1 + α) J."""
    if problem.utility.kind is not UtilityKind.LOG or not problem.consumption_only:
        raise ConfigurationError("the log case needs log utility and no terminal utility")
    lattice = problem.lattice
    rates = deterministic_rates(problem.discount)
    intensities = _constant_intensities(lattice)

    optimal = solve_optimal_plan(problem, scheme=scheme, **solver)
    cstar = cstar_forward(optimal.nu, optimal.solution.qstar, problem.pricing, problem.discount)
    alpha = alpha_solve(rates, lattice.step, alpha_method)
    k_values = np.asarray(kfun(alpha), dtype=float)
    values = optimal.solution.as_process()
    j = extract_J(values, cstar, alpha)
    jump_sizes = tuple(
        tree_integrands(lattice, lattice.child_view(n, j[n + 1]))[1] for n in range(lattice.steps)
    )
    solution = LogCaseSolution(
        alpha=alpha,
        k=k_values,
        j=j,
        jump_sizes=jump_sizes,
        residual=reconstruction_residual(values, cstar, alpha, j),
        pbar=pbar_measure(k_values, tilt, lattice),
        cstar=cstar,
        j_ode=solve_J_ode(rates, intensities, tilt.z, tilt.theta, lattice.step, alpha),
        optimal=optimal,
    )
    worst = max(row.spread for row in j_spread(j, lattice))
    logger.info(f"Log case: alpha(0)={alpha[0]:.12g}, max J spread {worst:.3g}")
    return solution
