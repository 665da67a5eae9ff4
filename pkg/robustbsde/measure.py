"""Equivalent measures on the lattice, relative entropy and the penalized criterion Γ(Q)."""

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.special import rel_entr

from robustbsde.errors import ConfigurationError, InvalidMeasure, NonpositiveBeta, TiltTooLarge
from robustbsde.lattice import (
    PROBABILITY_TOLERANCE,
    AdaptedProcess,
    DiscountSpec,
    Lattice,
    dump_nodes,
)

logger = logging.getLogger(__name__)


class EntropyForm(str, Enum):
    """Discretizations of the discounted entropy penalty."""

    RIEMANN = "riemann"
    STEPWISE_KL = "stepwise_kl"


@dataclass(frozen=True, eq=False)
class NodeMeasure:
    """A measure given by per-node transition probabilities over the children."""

    lattice: Lattice
    probabilities: tuple[np.ndarray, ...]

    def __post_init__(self):
        probs = tuple(np.asarray(q, dtype=float) for q in self.probabilities)
        object.__setattr__(self, "probabilities", probs)
        if len(probs) != self.lattice.steps:
            raise InvalidMeasure(f"expected {self.lattice.steps} slices, got {len(probs)}")
        for k, q in enumerate(probs):
            if q.shape != self.lattice.probabilities[k].shape:
                raise InvalidMeasure(f"slice {k} has shape {q.shape}")
            if not np.all(np.isfinite(q)) or np.any(q < 0):
                raise InvalidMeasure(f"slice {k} has negative or non-finite probabilities")
            gap = np.max(np.abs(q.sum(axis=1) - 1.0))
            if gap > PROBABILITY_TOLERANCE:
                raise InvalidMeasure(f"slice {k} probabilities sum to 1 only within {gap:.3g}")

    @classmethod
    def base(cls, lattice: Lattice) -> "NodeMeasure":
        return cls(lattice, lattice.probabilities)

    @cached_property
    def densities(self) -> tuple[np.ndarray, ...]:
        """Density process Z^Q: product of q/p along the path from the root."""
        lattice = self.lattice
        densities = [np.ones(1)]
        for k in range(lattice.steps):
            ratio = (self.probabilities[k] / lattice.probabilities[k]).ravel()
            densities.append(lattice.spread(k, densities[k]) * ratio)
        return tuple(densities)

    @cached_property
    def path_probabilities(self) -> tuple[np.ndarray, ...]:
        return self.lattice.path_probabilities(self.probabilities)

    def expect(self, k: int, values: np.ndarray) -> float:
        """E^Q of a slice-k quantity."""
        return float(np.dot(self.path_probabilities[k], values))

    def martingale_residual(self) -> float:
        """max |sum_children p * Z_child / Z_node - 1| over nodes with Z_node > 0."""
        lattice = self.lattice
        worst = 0.0
        for k in range(lattice.steps):
            parent = self.densities[k]
            alive = parent > 0
            children = lattice.child_view(k, self.densities[k + 1])[alive]
            ratios = children / parent[alive, None]
            sums = np.sum(lattice.probabilities[k][alive] * ratios, axis=1)
            if sums.size:
                worst = max(worst, float(np.max(np.abs(sums - 1.0))))
        return worst

    def is_equivalent(self) -> bool:
        return all(np.all(q > 0) for q in self.probabilities)


@dataclass(frozen=True, eq=False)
class GirsanovTilt:
    """Brownian drift loading theta (per coordinate) and jump log-intensity tilt z (per channel)."""

    theta: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        theta = np.atleast_1d(np.asarray(self.theta, dtype=float))
        z = np.atleast_1d(np.asarray(self.z, dtype=float))
        if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(z))):
            raise ConfigurationError("tilt parameters must be finite")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "z", z)

    @classmethod
    def zero(cls, lattice: Lattice) -> "GirsanovTilt":
        return cls(np.zeros(lattice.brownian_dim), np.zeros(lattice.jump_channels))

    def check_on(self, lattice: Lattice) -> None:
        if self.theta.shape != (lattice.brownian_dim,) or self.z.shape != (lattice.jump_channels,):
            raise ConfigurationError(
                f"tilt has theta{self.theta.shape}, z{self.z.shape}; lattice has "
                f"p={lattice.brownian_dim}, d={lattice.jump_channels}"
            )


def weighted_measure(
    lattice: Lattice,
    loadings: Sequence[np.ndarray],
    jump_weights: Sequence[np.ndarray],
) -> NodeMeasure:
    """q ∝ p * prod_m (1 + loading_m b_m sqrt(dt)) * w_j, renormalized per node.

    ``loadings[k]`` has shape (p,) or (N_k, p); ``jump_weights[k]`` has shape (d,)
    or (N_k, d) and gives w_j for j >= 1 (w_0 = 1).
    """
    increments = lattice.brownian_increments
    probabilities = []
    for k in range(lattice.steps):
        loading = np.atleast_2d(np.asarray(loadings[k], dtype=float))
        factor = np.prod(1.0 + loading[:, None, :] * increments[None, :, :], axis=2)
        if np.any(factor <= 0):
            raise TiltTooLarge(
                f"Brownian factor {factor.min():.6g} <= 0 at time index {k}; "
                "need |theta| sqrt(dt) < 1"
            )
        weights = np.atleast_2d(np.asarray(jump_weights[k], dtype=float))
        weights = np.concatenate([np.ones((weights.shape[0], 1)), weights], axis=1)
        w = lattice.probabilities[k] * factor * weights[:, lattice.child_jumps]
        probabilities.append(w / np.sum(w, axis=1, keepdims=True))
    return NodeMeasure(lattice, tuple(probabilities))


def tilt_to_measure(tilt: GirsanovTilt, lattice: Lattice) -> NodeMeasure:
    """One-step discrete Doléans-Dade density with drift theta and jump tilt z."""
    tilt.check_on(lattice)
    jump_weight = np.exp(-tilt.z)
    return weighted_measure(
        lattice, [tilt.theta] * lattice.steps, [jump_weight] * lattice.steps
    )


def implied_intensity(measure: NodeMeasure) -> tuple[np.ndarray, ...]:
    """Exact per-node jump intensity implied by the measure: q(jump i) / dt."""
    lattice = measure.lattice
    return tuple(
        measure.probabilities[k] @ lattice.jump_increments / lattice.step
        for k in range(lattice.steps)
    )


def stepwise_kl(measure: NodeMeasure) -> tuple[np.ndarray, ...]:
    """KL(q_node || p_node) per node, with 0 ln 0 = 0."""
    lattice = measure.lattice
    return tuple(
        np.sum(rel_entr(measure.probabilities[k], lattice.probabilities[k]), axis=1)
        for k in range(lattice.steps)
    )


def relative_entropy(measure: NodeMeasure, lattice: Lattice | None = None) -> float:
    """H(Q|P) = E^Q[ln Z^Q_T] summed over leaf paths."""
    lattice = measure.lattice if lattice is None else lattice
    lattice.require_same(measure.lattice)
    q_paths = measure.path_probabilities[-1]
    p_paths = lattice.path_probabilities()[-1]
    return float(np.sum(rel_entr(q_paths, p_paths)))


def _log_density(measure: NodeMeasure, k: int) -> np.ndarray:
    z = measure.densities[k]
    return np.log(np.where(z > 0, z, 1.0))


def discounted_entropy(
    measure: NodeMeasure,
    discount: DiscountSpec,
    lattice: Lattice | None = None,
    form: EntropyForm | str = EntropyForm.STEPWISE_KL,
) -> float:
    """Discounted entropy penalty R^delta_{0,T}(Q) under the chosen discretization."""
    lattice = measure.lattice if lattice is None else lattice
    lattice.require_same(measure.lattice)
    form = EntropyForm(form)
    paths = measure.path_probabilities
    factors = discount.factors
    if form is EntropyForm.STEPWISE_KL:
        kl = stepwise_kl(measure)
        return float(sum(np.dot(paths[k], factors[k] * kl[k]) for k in range(lattice.steps)))
    running = sum(
        np.dot(paths[k], discount.rate[k] * factors[k] * _log_density(measure, k))
        for k in range(lattice.steps)
    )
    final = np.dot(paths[-1], factors[-1] * _log_density(measure, lattice.steps))
    return float(running * lattice.step + final)


@dataclass(frozen=True, eq=False)
class CriterionSpec:
    """Cost U, terminal utility Ū_T, discounting and penalty weight beta of Γ."""

    cost: AdaptedProcess
    terminal: np.ndarray
    discount: DiscountSpec
    beta: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "terminal", np.asarray(self.terminal, dtype=float))
        if not (self.beta > 0):
            raise NonpositiveBeta(f"beta must be positive, got {self.beta}")
        if not np.all(np.isfinite(self.terminal)):
            raise ConfigurationError("terminal utility values must be finite")
        if not all(np.all(np.isfinite(v)) for v in self.cost.values[:-1]):
            raise ConfigurationError("cost process values must be finite")


def criterion_gamma(
    spec: CriterionSpec,
    measure: NodeMeasure,
    lattice: Lattice | None = None,
    form: EntropyForm | str = EntropyForm.STEPWISE_KL,
) -> float:
    """Γ(Q) = E^Q[sum_k S_k U_k dt + S_T Ū_T] + beta * discounted entropy by forward sums."""
    lattice = measure.lattice if lattice is None else lattice
    lattice.require_same(measure.lattice)
    paths = measure.path_probabilities
    factors = spec.discount.factors
    running = sum(
        np.dot(paths[k], factors[k] * spec.cost[k]) for k in range(lattice.steps)
    ) * lattice.step
    final = np.dot(paths[-1], factors[-1] * spec.terminal)
    penalty = discounted_entropy(measure, spec.discount, lattice, form)
    return float(running + final + spec.beta * penalty)


def beta_reduce(spec: CriterionSpec) -> CriterionSpec:
    """Rescale to beta = 1: the minimizing Q is unchanged and the value scales by beta."""
    if not (spec.beta > 0):
        raise NonpositiveBeta(f"beta must be positive, got {spec.beta}")
    beta = spec.beta
    return CriterionSpec(
        cost=spec.cost.map(lambda v: v / beta),
        terminal=spec.terminal / beta,
        discount=spec.discount,
        beta=1.0,
    )


def backward_expectation(
    lattice: Lattice,
    probabilities: Sequence[np.ndarray],
    terminal: np.ndarray,
    running: Sequence[np.ndarray] | AdaptedProcess | None = None,
    factors: Sequence[np.ndarray] | None = None,
) -> tuple[np.ndarray, ...]:
    """V_K = terminal; V_k = running_k + factor_k * E^q[V_{k+1} | node]."""
    values: list[np.ndarray] = [np.empty(0)] * (lattice.steps + 1)
    values[-1] = np.asarray(terminal, dtype=float)
    for k in reversed(range(lattice.steps)):
        continuation = lattice.expectation(k, values[k + 1], probabilities[k])
        if factors is not None:
            continuation = factors[k] * continuation
        values[k] = continuation + (running[k] if running is not None else 0.0)
    return tuple(values)


def export_measure(measure: NodeMeasure, path: Path) -> None:
    """Node file with an extra q_prob column."""
    dump_nodes(measure.lattice, path, {"q_prob": measure.probabilities})
