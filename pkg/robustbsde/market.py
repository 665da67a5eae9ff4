"""Jump-diffusion market on the lattice: d + p assets, constant savings account.

One-step price ratio per child:

    S_child / S_node = 1 + μ dt + φ (ΔH - λ dt) + σ b sqrt(dt)

with compensated jump increments. The market prices of risk solve
Σ (θ, γ) = -μ for Σ = [σ, λφ], which makes the tilted one-step expectation
of every asset exact to first order in dt.
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from robustbsde.errors import (
    BadJumpSize,
    DimensionMismatch,
    JumpPremiumOutOfRange,
    NonDeterministicCoefficients,
    NonpositivePrice,
    SingularSigma,
)
from robustbsde.lattice import AdaptedProcess, Lattice
from robustbsde.measure import GirsanovTilt, NodeMeasure

logger = logging.getLogger(__name__)

# Above this condition number Σ is treated as singular.
MAX_CONDITION = 1e12


@dataclass(frozen=True, eq=False)
class Market:
    lattice: Lattice
    mu: np.ndarray
    sigma: np.ndarray
    phi: np.ndarray
    intensity: np.ndarray
    prices: tuple[np.ndarray, ...]

    @property
    def asset_count(self) -> int:
        return self.mu.size

    @cached_property
    def big_sigma(self) -> np.ndarray:
        """Σ = [σ, λφ]; column j of the jump block is λ^j φ^{., j}."""
        return _big_sigma(self.sigma, self.phi, self.intensity)

    @cached_property
    def condition_number(self) -> float:
        return float(np.linalg.cond(self.big_sigma))

    @cached_property
    def step_ratios(self) -> np.ndarray:
        """S_child / S_node for every child, shape (B, n)."""
        return _step_ratios(self.lattice, self.mu, self.sigma, self.phi, self.intensity)


@dataclass(frozen=True)
class RiskPremia:
    theta: np.ndarray
    gamma: np.ndarray
    z: np.ndarray

    def tilt(self) -> GirsanovTilt:
        return GirsanovTilt(self.theta, self.z)


def _big_sigma(sigma: np.ndarray, phi: np.ndarray, intensity: np.ndarray) -> np.ndarray:
    return np.hstack([sigma, phi * intensity[None, :]])


def _step_ratios(
    lattice: Lattice, mu: np.ndarray, sigma: np.ndarray, phi: np.ndarray, intensity: np.ndarray
) -> np.ndarray:
    dt = lattice.step
    compensated = lattice.jump_increments - intensity[None, :] * dt
    return (
        1.0 + mu[None, :] * dt + compensated @ phi.T + lattice.brownian_increments @ sigma.T
    )


def _constant_intensity(lattice: Lattice) -> np.ndarray:
    if lattice.jump_channels == 0:
        return np.zeros(0)
    first = lattice.intensities[0][0]
    if any(np.any(lam != first) for lam in lattice.intensities):
        raise NonDeterministicCoefficients("the market needs constant jump intensities")
    return np.array(first, dtype=float)


def build_market(
    mu: Sequence[float],
    sigma: Sequence[Sequence[float]],
    phi: Sequence[Sequence[float]],
    lattice: Lattice,
    initial_prices: Sequence[float] | None = None,
) -> Market:
    """Validate coefficients against the lattice and propagate prices to every node.

    Intensities are taken from the lattice, so λ in Σ is the λ of the tree.
    """
    p, d = lattice.brownian_dim, lattice.jump_channels
    n = p + d
    if n == 0:
        raise DimensionMismatch("a market needs at least one risky asset")
    mu = np.asarray(mu, dtype=float).reshape(-1)
    sigma = np.asarray(sigma, dtype=float).reshape(-1, p) if p else np.zeros((mu.size, 0))
    phi = np.asarray(phi, dtype=float).reshape(-1, d) if d else np.zeros((mu.size, 0))
    if mu.size != n or sigma.shape != (n, p) or phi.shape != (n, d):
        raise DimensionMismatch(
            f"need {n} assets with sigma {n}x{p} and phi {n}x{d}; got mu {mu.shape}, "
            f"sigma {sigma.shape}, phi {phi.shape}"
        )
    if np.any(phi <= -1.0):
        raise BadJumpSize(f"jump sizes must exceed -1, got min {phi.min():.6g}")
    start = np.ones(n) if initial_prices is None else np.asarray(initial_prices, dtype=float)
    if start.shape != (n,) or np.any(start <= 0):
        raise NonpositivePrice("initial prices must be positive, one per asset")

    intensity = _constant_intensity(lattice)
    big_sigma = _big_sigma(sigma, phi, intensity)
    condition = float(np.linalg.cond(big_sigma))
    if np.linalg.matrix_rank(big_sigma) < n or condition > MAX_CONDITION:
        raise SingularSigma(f"Sigma = [sigma, lambda*phi] is singular (cond {condition:.3g})")
    ratios = _step_ratios(lattice, mu, sigma, phi, intensity)
    if np.any(ratios <= 0):
        raise NonpositivePrice(
            f"one-step price ratio {ratios.min():.6g} <= 0; refine the grid or shrink coefficients"
        )

    prices = [start[None, :]]
    for k in range(lattice.steps):
        prices.append((prices[k][:, None, :] * ratios[None, :, :]).reshape(-1, n))
    logger.info(f"Built market with {n} assets, cond(Sigma) = {condition:.3g}")
    return Market(lattice, mu, sigma, phi, intensity, tuple(prices))


def market_price_of_risk(market: Market) -> RiskPremia:
    """(θ, γ) from Σ (θ, γ) = -μ and z^j = -ln(1 + γ_j)."""
    try:
        solved = np.linalg.solve(market.big_sigma, -market.mu)
    except np.linalg.LinAlgError as e:
        raise SingularSigma(f"cannot invert Sigma: {e}") from e
    p = market.lattice.brownian_dim
    theta, gamma = solved[:p], solved[p:]
    if np.any(1.0 + gamma <= 0):
        raise JumpPremiumOutOfRange(f"1 + gamma must be positive, got gamma = {gamma}")
    logger.info("Market prices of risk solve Sigma (theta, gamma) = -mu (martingale sign)")
    return RiskPremia(theta=theta, gamma=gamma, z=-np.log1p(gamma))


def martingale_residual(market: Market, pricing: NodeMeasure) -> float:
    """max over nodes and assets of |E^q[S_child] / S_node - 1|."""
    market.lattice.require_same(pricing.lattice)
    return max(
        float(np.max(np.abs(q @ market.step_ratios - 1.0))) for q in pricing.probabilities
    )


def _holdings_slice(holdings: Sequence[np.ndarray], k: int, nodes: int, n: int) -> np.ndarray:
    raw = np.asarray(holdings[k], dtype=float)
    try:
        return np.broadcast_to(raw, (nodes, n))
    except ValueError as e:
        raise DimensionMismatch(f"holdings at time index {k} have shape {raw.shape}") from e


def wealth_path(
    capital: float,
    holdings: Sequence[np.ndarray],
    consumption: AdaptedProcess,
    market: Market,
) -> AdaptedProcess:
    """X_child = X_node + π_node . (S_child - S_node) - c_node dt, X_0 = x; π in shares."""
    lattice = market.lattice
    consumption.check_on(lattice)
    if len(holdings) != lattice.steps:
        raise DimensionMismatch(f"need holdings for {lattice.steps} slices, got {len(holdings)}")
    n = market.asset_count
    wealth = [np.array([float(capital)])]
    for k in range(lattice.steps):
        shares = _holdings_slice(holdings, k, lattice.node_count(k), n)
        moves = lattice.child_view(k, market.prices[k + 1]) - market.prices[k][:, None, :]
        gains = np.sum(shares[:, None, :] * moves, axis=2)
        step = wealth[k][:, None] + gains - (consumption[k] * lattice.step)[:, None]
        wealth.append(step.reshape(-1))
    return AdaptedProcess(tuple(wealth))


@dataclass(frozen=True)
class Admissibility:
    admissible: bool
    first_violation: tuple[int, int] | None = None


def check_admissible(wealth: AdaptedProcess) -> Admissibility:
    """X >= 0 at every node; reports the earliest (time index, node) that breaks it."""
    for k, values in enumerate(wealth.values):
        negative = np.flatnonzero(values < 0)
        if negative.size:
            return Admissibility(False, (k, int(negative[0])))
    return Admissibility(True)


def budget_identity_gap(
    capital: float,
    holdings: Sequence[np.ndarray],
    consumption: AdaptedProcess,
    market: Market,
    pricing: NodeMeasure,
) -> float:
    """E^P̃[sum c dt + X_T] - x."""
    wealth = wealth_path(capital, holdings, consumption, market)
    paths = pricing.path_probabilities
    lattice = market.lattice
    spent = lattice.step * sum(
        float(np.dot(paths[k], consumption[k])) for k in range(lattice.steps)
    )
    return spent + float(np.dot(paths[-1], wealth.leaves)) - capital
