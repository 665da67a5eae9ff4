"""Discrete scenario tree for p Brownian coordinates and d counting processes.

Each node at time index k has 2^p * (d + 1) children. Child c encodes a jump
outcome j = c // 2^p (0 = no jump, i >= 1 = channel i jumps) and a Brownian
sign vector b = signs[c % 2^p]. Nodes of slice k are stored flat; the children
of node n sit at indices n * B .. n * B + B - 1 of slice k + 1, so every
per-slice quantity is a numpy array and every reduction over children is a
reshape plus a sum along axis 1.
"""

import csv
import itertools
import logging
import math
from collections.abc import Callable
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from robustbsde.errors import (
    ConfigurationError,
    DegenerateLattice,
    IntensityTooLarge,
    LatticeMismatch,
    LatticeTooLarge,
    NegativeRate,
    NonpositiveIntensity,
    UnflaggedZeroRate,
)

logger = logging.getLogger(__name__)

PROBABILITY_TOLERANCE = 1e-14
MAX_LATTICE_LEAVES = 1 << 20


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_k = k * step on [0, horizon]."""

    horizon: float
    steps: int

    def __post_init__(self):
        if not (math.isfinite(self.horizon) and self.horizon > 0):
            raise ConfigurationError(f"horizon must be positive and finite, got {self.horizon}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ConfigurationError(f"steps must be an integer >= 1, got {self.steps}")

    @property
    def step(self) -> float:
        return self.horizon / self.steps

    @property
    def times(self) -> np.ndarray:
        # linspace pins t_K to the horizon exactly
        return np.linspace(0.0, self.horizon, self.steps + 1)

    def time(self, k: int) -> float:
        return float(self.times[k])


@dataclass(frozen=True, eq=False)
class NodeState:
    """What a coefficient function may look at: time and the path summary of each node."""

    time_index: int
    time: float
    brownian: np.ndarray
    jumps: np.ndarray

    @property
    def size(self) -> int:
        return self.brownian.shape[0]


IntensityFn = Callable[[float, NodeState], object]
NodeFn = Callable[[float, NodeState], object]


def constant_intensity(*rates: float) -> IntensityFn:
    """Intensity function returning the same rate vector at every node."""
    row = np.asarray(rates, dtype=float)

    def intensity(_t: float, state: NodeState) -> np.ndarray:
        return np.broadcast_to(row, (state.size, row.size))

    return intensity


@dataclass(frozen=True, eq=False)
class Lattice:
    """Immutable scenario tree with base transition probabilities."""

    grid: TimeGrid
    brownian_dim: int
    jump_channels: int
    probabilities: tuple[np.ndarray, ...]
    intensities: tuple[np.ndarray, ...]
    brownian: tuple[np.ndarray, ...]
    jump_counts: tuple[np.ndarray, ...]
    child_signs: np.ndarray
    child_jumps: np.ndarray
    single_path: bool = False

    @property
    def steps(self) -> int:
        return self.grid.steps

    @property
    def step(self) -> float:
        return self.grid.step

    @property
    def branching(self) -> int:
        return int(self.child_jumps.size)

    @property
    def sign_count(self) -> int:
        return 2**self.brownian_dim

    def node_count(self, k: int) -> int:
        return self.branching**k

    @property
    def leaf_count(self) -> int:
        return self.node_count(self.steps)

    @property
    def total_nodes(self) -> int:
        return sum(self.node_count(k) for k in range(self.steps + 1))

    def state(self, k: int) -> NodeState:
        return NodeState(k, self.grid.time(k), self.brownian[k], self.jump_counts[k])

    @cached_property
    def brownian_increments(self) -> np.ndarray:
        """ΔW per child, shape (B, p)."""
        return self.child_signs * math.sqrt(self.step)

    @cached_property
    def jump_increments(self) -> np.ndarray:
        """ΔH per child, shape (B, d): one-hot on the jumping channel."""
        channels = np.arange(1, self.jump_channels + 1)
        return (self.child_jumps[:, None] == channels[None, :]).astype(float)

    def child_view(self, k: int, child_values: np.ndarray) -> np.ndarray:
        """Reshape slice k + 1 values to (nodes of slice k, B, ...)."""
        values = np.asarray(child_values)
        return values.reshape(self.node_count(k), self.branching, *values.shape[1:])

    def expectation(
        self, k: int, child_values: np.ndarray, probabilities: np.ndarray | None = None
    ) -> np.ndarray:
        """One-step conditional expectation from slice k + 1 back to slice k."""
        probs = self.probabilities[k] if probabilities is None else probabilities
        return np.sum(probs * self.child_view(k, child_values), axis=1)

    def parents(self, k: int) -> np.ndarray:
        """Index in slice k - 1 of each node of slice k."""
        return np.arange(self.node_count(k)) // self.branching

    def outcomes(self, k: int) -> np.ndarray:
        """Child index (0..B-1) of each node of slice k relative to its parent."""
        return np.arange(self.node_count(k)) % self.branching

    def spread(self, k: int, node_values: np.ndarray) -> np.ndarray:
        """Copy slice-k node values onto the children in slice k + 1."""
        return np.repeat(np.asarray(node_values), self.branching, axis=0)

    def path_probabilities(
        self, probabilities: tuple[np.ndarray, ...] | None = None
    ) -> tuple[np.ndarray, ...]:
        """Probability of reaching each node, slice by slice."""
        probs = self.probabilities if probabilities is None else probabilities
        paths = [np.ones(1)]
        for k in range(self.steps):
            paths.append((paths[k][:, None] * probs[k]).ravel())
        return tuple(paths)

    def require_same(self, other: "Lattice") -> None:
        if other is not self:
            raise LatticeMismatch("objects were built on different lattices")


def _evaluate_intensity(intensity_fn: IntensityFn | None, state: NodeState, d: int) -> np.ndarray:
    if d == 0:
        return np.zeros((state.size, 0))
    raw = np.asarray(intensity_fn(state.time, state), dtype=float)
    return np.array(np.broadcast_to(raw, (state.size, d)), dtype=float)


def lattice_size(brownian_dim: int, jump_channels: int, steps: int) -> int:
    """Leaf count (2^p (d + 1))^K, computed without building anything."""
    return ((1 << int(brownian_dim)) * (int(jump_channels) + 1)) ** int(steps)


def build_lattice(
    grid: TimeGrid,
    brownian_dim: int,
    jump_channels: int,
    intensity_fn: IntensityFn | None = None,
    single_path: bool = False,
) -> Lattice:
    """Build the product tree of two-point Brownian signs and one multinomial jump event.

    Base probability of child (b, j) is 2^-p * pi_j with pi_j = lambda^j * dt for
    j >= 1 and pi_0 = 1 - sum_j lambda^j * dt, so at most one channel jumps per step.
    """
    p, d = int(brownian_dim), int(jump_channels)
    if p < 0 or d < 0:
        raise ConfigurationError(f"dimensions must be nonnegative, got p={p}, d={d}")
    if p + d == 0 and not single_path:
        raise DegenerateLattice("p = d = 0 requires the single-path flag")
    if d > 0 and intensity_fn is None:
        raise ConfigurationError("jump channels need an intensity function")

    leaves = lattice_size(p, d, grid.steps)
    if leaves > MAX_LATTICE_LEAVES:
        raise LatticeTooLarge(
            f"K={grid.steps} with {(1 << p) * (d + 1)} children per node gives {leaves} leaves, "
            f"above the limit of {MAX_LATTICE_LEAVES}"
        )

    # reshape keeps the (1, 0) shape when p = 0
    signs = np.array(list(itertools.product((-1.0, 1.0), repeat=p)), dtype=float)
    signs = signs.reshape(1 << p, p)
    sign_count = signs.shape[0]
    child_signs = np.tile(signs, (d + 1, 1))
    child_jumps = np.repeat(np.arange(d + 1), sign_count)
    branching = child_jumps.size
    jump_onehot = (child_jumps[:, None] == np.arange(1, d + 1)[None, :]).astype(float)

    dt = grid.step
    root_dt = math.sqrt(dt)
    brownian = [np.zeros((1, p))]
    counts = [np.zeros((1, d))]
    probabilities = []
    intensities = []
    for k in range(grid.steps):
        state = NodeState(k, grid.time(k), brownian[k], counts[k])
        n = state.size
        lam = _evaluate_intensity(intensity_fn, state, d)
        if not np.all(np.isfinite(lam)) or np.any(lam <= 0):
            raise NonpositiveIntensity(
                f"intensities must be positive and finite (time index {k}, min {lam.min():.6g})"
            )
        total = lam.sum(axis=1) * dt
        if np.any(total >= 1.0):
            raise IntensityTooLarge(
                f"sum of lambda*dt reaches {total.max():.6g} >= 1 at time index {k}; "
                "use more steps or smaller intensities"
            )
        pi = np.concatenate([(1.0 - total)[:, None], lam * dt], axis=1)
        probabilities.append(pi[:, child_jumps] / sign_count)
        intensities.append(lam)
        moved = brownian[k][:, None, :] + child_signs[None] * root_dt
        brownian.append(moved.reshape(n * branching, p))
        counts.append((counts[k][:, None, :] + jump_onehot[None]).reshape(n * branching, d))

    lattice = Lattice(
        grid=grid,
        brownian_dim=p,
        jump_channels=d,
        probabilities=tuple(probabilities),
        intensities=tuple(intensities),
        brownian=tuple(brownian),
        jump_counts=tuple(counts),
        child_signs=child_signs,
        child_jumps=child_jumps,
        single_path=p + d == 0,
    )
    logger.info(
        f"Built lattice: K={grid.steps}, dt={dt:.6g}, p={p}, d={d}, "
        f"{branching} children/node, {lattice.leaf_count} leaves"
    )
    return lattice


@dataclass(frozen=True, eq=False)
class AdaptedProcess:
    """One value per node of every slice 0..K.

    ``terminal_only`` marks data that is only meaningful on the leaves (e.g. the
    terminal utility); earlier slices then hold NaN.
    """

    values: tuple[np.ndarray, ...]
    terminal_only: bool = False

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(np.asarray(v, dtype=float) for v in self.values))

    def __getitem__(self, k: int) -> np.ndarray:
        return self.values[k]

    @property
    def steps(self) -> int:
        return len(self.values) - 1

    @property
    def leaves(self) -> np.ndarray:
        return self.values[-1]

    def is_deterministic(self, upto: int | None = None) -> bool:
        """True when every slice (up to ``upto``, exclusive) is node-independent."""
        slices = self.values if upto is None else self.values[:upto]
        return all(v.size == 0 or np.ptp(v) == 0 for v in slices)

    def check_on(self, lattice: Lattice) -> None:
        if self.steps != lattice.steps:
            raise LatticeMismatch(f"process has {self.steps} steps, lattice has {lattice.steps}")
        for k, v in enumerate(self.values):
            if v.shape != (lattice.node_count(k),):
                raise LatticeMismatch(f"slice {k} has shape {v.shape}")

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "AdaptedProcess":
        return AdaptedProcess(tuple(fn(v) for v in self.values), self.terminal_only)


def adapted_from_fn(f: NodeFn, lattice: Lattice) -> AdaptedProcess:
    """Evaluate f(t, state) on every slice; f may return a scalar or a per-node array."""
    values = []
    for k in range(lattice.steps + 1):
        state = lattice.state(k)
        raw = np.asarray(f(state.time, state), dtype=float)
        values.append(np.array(np.broadcast_to(raw, (state.size,)), dtype=float))
    return AdaptedProcess(tuple(values))


def constant_process(value: float, lattice: Lattice) -> AdaptedProcess:
    return AdaptedProcess(
        tuple(np.full(lattice.node_count(k), float(value)) for k in range(lattice.steps + 1))
    )


def terminal_process(leaves: np.ndarray, lattice: Lattice) -> AdaptedProcess:
    leaves = np.asarray(leaves, dtype=float)
    if leaves.shape != (lattice.leaf_count,):
        raise LatticeMismatch(f"terminal data has shape {leaves.shape}")
    slices = [np.full(lattice.node_count(k), np.nan) for k in range(lattice.steps)]
    return AdaptedProcess((*slices, leaves), terminal_only=True)


def leaf_values(data: "np.ndarray | AdaptedProcess | float", lattice: Lattice) -> np.ndarray:
    """Normalize terminal data (array, terminal process or scalar) to a leaf array."""
    if isinstance(data, AdaptedProcess):
        data.check_on(lattice)
        return data.leaves
    leaves = np.array(np.broadcast_to(np.asarray(data, dtype=float), (lattice.leaf_count,)))
    return leaves


@dataclass(frozen=True, eq=False)
class DiscountSpec:
    """Discount rate delta and S^delta_{t_k} = prod_{j<k} exp(-delta_{t_j} dt)."""

    rate: AdaptedProcess
    factors: tuple[np.ndarray, ...]
    allow_zero: bool = False

    def step_factor(self, k: int, step: float) -> np.ndarray:
        return np.exp(-self.rate[k] * step)

    @property
    def is_zero(self) -> bool:
        return all(not np.any(v) for v in self.rate.values[:-1])

    @property
    def is_deterministic(self) -> bool:
        return self.rate.is_deterministic(upto=self.rate.steps)

    def deterministic_rates(self) -> np.ndarray:
        """delta(t_k) for k = 0..K-1 when the rate is node-independent."""
        return np.array([float(v[0]) for v in self.rate.values[:-1]])


def discount_process(
    rate: AdaptedProcess, lattice: Lattice, allow_zero: bool = False
) -> DiscountSpec:
    """Left-Riemann discount factors; zeros are only accepted in the flagged zero mode."""
    rate.check_on(lattice)
    for k, v in enumerate(rate.values[:-1]):
        if not np.all(np.isfinite(v)):
            raise ConfigurationError(f"discount rate is not finite at time index {k}")
        if np.any(v < 0):
            raise NegativeRate(f"discount rate {v.min():.6g} < 0 at time index {k}")
        if np.any(v == 0) and not allow_zero:
            raise UnflaggedZeroRate(
                f"discount rate is zero at time index {k}; set the zero-discount flag"
            )
    factors = [np.ones(1)]
    for k in range(lattice.steps):
        factors.append(lattice.spread(k, factors[k] * np.exp(-rate[k] * lattice.step)))
    return DiscountSpec(rate=rate, factors=tuple(factors), allow_zero=allow_zero)


def zero_discount(lattice: Lattice) -> DiscountSpec:
    return discount_process(constant_process(0.0, lattice), lattice, allow_zero=True)


def dump_nodes(
    lattice: Lattice, path: Path, extra_columns: dict[str, tuple[np.ndarray, ...]] | None = None
) -> None:
    """Write the node file: time_index,node_id,parent_id,brownian_signs,jump_outcome,base_prob."""
    extra = extra_columns or {}
    header = [
        "time_index",
        "node_id",
        "parent_id",
        "brownian_signs",
        "jump_outcome",
        "base_prob",
        *extra,
    ]
    sign_text = ["".join("+" if s > 0 else "-" for s in row) for row in lattice.child_signs]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerow([0, 0, -1, "", "", repr(1.0), *(repr(1.0) for _ in extra)])
        for k in range(1, lattice.steps + 1):
            parents = lattice.parents(k)
            outcomes = lattice.outcomes(k)
            base = lattice.probabilities[k - 1][parents, outcomes]
            columns = [cols[k - 1][parents, outcomes] for cols in extra.values()]
            for node in range(lattice.node_count(k)):
                c = outcomes[node]
                writer.writerow(
                    [
                        k,
                        node,
                        parents[node],
                        sign_text[c],
                        int(lattice.child_jumps[c]),
                        repr(float(base[node])),
                        *(repr(float(col[node])) for col in columns),
                    ]
                )
