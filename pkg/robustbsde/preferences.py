"""Utilities (with marginals and inverse marginals) and consumption/terminal plans."""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from robustbsde.errors import ConfigurationError, InvalidPlan, LatticeMismatch
from robustbsde.lattice import AdaptedProcess, Lattice


class UtilityKind(str, Enum):
    LOG = "log"
    POWER = "power"
    NONE = "none"


@dataclass(frozen=True)
class UtilitySpec:
    """Log or power utility, or ``none`` for a consumption-only terminal slot."""

    kind: UtilityKind
    gamma: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", UtilityKind(self.kind))
        if self.kind is UtilityKind.POWER:
            if self.gamma is None or not (0.0 < self.gamma < 1.0):
                raise ConfigurationError(f"power utility needs gamma in (0, 1), got {self.gamma}")

    @classmethod
    def parse(cls, text: str) -> "UtilitySpec":
        """Parse ``log``, ``none`` or ``power:<gamma>``."""
        name, _, arg = text.strip().lower().partition(":")
        if name == UtilityKind.POWER.value:
            try:
                gamma = float(arg)
            except ValueError:
                raise ConfigurationError(f"cannot read power exponent from {text!r}") from None
            return cls(UtilityKind.POWER, gamma)
        if name in (UtilityKind.LOG.value, UtilityKind.NONE.value) and not arg:
            return cls(UtilityKind(name))
        raise ConfigurationError(f"unknown utility {text!r}; use log, none or power:<gamma>")

    @property
    def is_none(self) -> bool:
        return self.kind is UtilityKind.NONE

    def label(self) -> str:
        return f"power:{self.gamma}" if self.kind is UtilityKind.POWER else self.kind.value

    def _require_defined(self) -> None:
        if self.is_none:
            raise ConfigurationError("the 'none' utility has no marginal or inverse")

    def value(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind is UtilityKind.LOG:
            return np.log(x)
        if self.kind is UtilityKind.POWER:
            return np.power(x, self.gamma) / self.gamma
        return np.zeros_like(x)

    def marginal(self, x: np.ndarray) -> np.ndarray:
        self._require_defined()
        x = np.asarray(x, dtype=float)
        if self.kind is UtilityKind.LOG:
            return 1.0 / x
        return np.power(x, self.gamma - 1.0)

    def inverse_marginal(self, y: np.ndarray) -> np.ndarray:
        """I = (U')^-1."""
        self._require_defined()
        y = np.asarray(y, dtype=float)
        if self.kind is UtilityKind.LOG:
            return 1.0 / y
        return np.power(y, 1.0 / (self.gamma - 1.0))

    def asymptotic_elasticity(self) -> float:
        self._require_defined()
        return 0.0 if self.kind is UtilityKind.LOG else float(self.gamma)


@dataclass(frozen=True, eq=False)
class Plan:
    """Consumption rate c on slices 0..K-1 (slice K is carried but unused) and terminal claim ψ."""

    consumption: AdaptedProcess
    terminal: np.ndarray

    def __post_init__(self):
        terminal = np.asarray(self.terminal, dtype=float)
        object.__setattr__(self, "terminal", terminal)
        running = self.consumption.values[:-1]
        if not all(np.all(np.isfinite(c)) and np.all(c >= 0) for c in running):
            raise InvalidPlan("consumption must be finite and nonnegative")
        if not (np.all(np.isfinite(terminal)) and np.all(terminal >= 0)):
            raise InvalidPlan("terminal claim must be finite and nonnegative")

    def check_on(self, lattice: Lattice) -> None:
        self.consumption.check_on(lattice)
        if self.terminal.shape != (lattice.leaf_count,):
            raise LatticeMismatch(f"terminal claim has shape {self.terminal.shape}")

    def scaled(self, factor: float) -> "Plan":
        return Plan(self.consumption.map(lambda c: c * factor), self.terminal * factor)

    def blend(self, other: "Plan", weight: float) -> "Plan":
        """(1 - weight) * self + weight * other."""
        consumption = AdaptedProcess(
            tuple(
                (1.0 - weight) * a + weight * b
                for a, b in zip(self.consumption.values, other.consumption.values)
            )
        )
        return Plan(consumption, (1.0 - weight) * self.terminal + weight * other.terminal)

    def dominates(self, other: "Plan") -> bool:
        """Componentwise self >= other on every used slice and leaf."""
        running = zip(self.consumption.values[:-1], other.consumption.values[:-1])
        return all(np.all(a >= b) for a, b in running) and bool(
            np.all(self.terminal >= other.terminal)
        )

    def relative_change(self, other: "Plan") -> float:
        """sup over nodes of |other - self| / |self| (absolute where self is 0)."""
        pairs = list(zip(self.consumption.values[:-1], other.consumption.values[:-1]))
        pairs.append((self.terminal, other.terminal))
        worst = 0.0
        for a, b in pairs:
            if a.size:
                scale = np.where(np.abs(a) > 0, np.abs(a), 1.0)
                worst = max(worst, float(np.max(np.abs(b - a) / scale)))
        return worst


def utility_inputs(
    plan: Plan, utility: UtilitySpec, terminal_utility: UtilitySpec
) -> tuple[AdaptedProcess, np.ndarray]:
    """(U(c), Ū(ψ)) as BSDE inputs; the slice-K consumption value is ignored downstream."""
    cost = plan.consumption.map(utility.value)
    if terminal_utility.is_none:
        return cost, np.zeros_like(plan.terminal)
    return cost, terminal_utility.value(plan.terminal)
