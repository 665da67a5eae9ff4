"""Exception hierarchy.

Every error names the model property it protects in ``property_name`` so the
CLI can say which invariant failed, not just that something did.
"""

from typing import Any


class RobustBsdeError(Exception):
    """Base class for all library errors."""

    property_name = "model invariant"

    def __init__(self, message: str, property_name: str | None = None):
        super().__init__(message)
        if property_name is not None:
            self.property_name = property_name

    def describe(self) -> str:
        return f"{self.property_name}: {self}"


class ConfigurationError(RobustBsdeError, ValueError):
    """A precondition or an input value is invalid."""

    property_name = "input validity"


class NumericalError(RobustBsdeError, ArithmeticError):
    """A computation produced an unusable result."""

    property_name = "numerical stability"


# Lattice construction


class IntensityTooLarge(ConfigurationError):
    property_name = "jump intensity bound (sum of lambda*dt < 1)"


class NonpositiveIntensity(ConfigurationError):
    property_name = "positive jump intensity"


class DegenerateLattice(ConfigurationError):
    property_name = "lattice dimension (p + d >= 1)"


class NegativeRate(ConfigurationError):
    property_name = "nonnegative discount rate"


class UnflaggedZeroRate(ConfigurationError):
    property_name = "positive discount rate (zero mode not flagged)"


class LatticeMismatch(ConfigurationError):
    property_name = "inputs defined on the same lattice"


class LatticeTooLarge(ConfigurationError):
    property_name = "lattice size (at most 2^20 leaves)"


# Measures and criterion


class InvalidMeasure(ConfigurationError):
    property_name = "probability measure on the tree"


class TiltTooLarge(ConfigurationError):
    property_name = "one-step Brownian factor positivity"


class NonpositiveBeta(ConfigurationError):
    property_name = "penalty weight beta > 0"


# BSDE


class SchemeMismatch(ConfigurationError):
    property_name = "K-martingale identity (recursion scheme only)"


class InputsNotOrdered(ConfigurationError):
    property_name = "comparison requires ordered inputs"


class NotComparable(ConfigurationError):
    property_name = "directional derivative between comparable plans"


class InvalidPlan(ConfigurationError):
    property_name = "nonnegative finite plan"


# Oracles


class DimensionTooLarge(ConfigurationError):
    property_name = "simplex grid enumeration size"


class TreeTooLarge(ConfigurationError):
    property_name = "whole-tree grid search size"


# Maximum principle


class NonpositiveNu(ConfigurationError):
    property_name = "budget multiplier nu > 0"


class NonpositiveCapital(ConfigurationError):
    property_name = "initial capital x > 0"


class BracketFailure(NumericalError):
    property_name = "monotone budget map f(nu)"


class BudgetNotMet(NumericalError):
    property_name = "budget binds at nu (|f(nu) - x| <= tol)"


class NoConvergence(NumericalError):
    """The plan/BSDE fixed point did not settle within the iteration budget."""

    property_name = "plan/BSDE fixed point"

    def __init__(self, message: str, last_iterate: Any = None, residual: float = float("nan")):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.residual = residual


# Log case


class Singular(NumericalError):
    property_name = "log-case 1 + alpha(t) != 0"


class NonDeterministicCoefficients(ConfigurationError):
    property_name = "deterministic discount and market coefficients"


# Market


class SingularSigma(ConfigurationError):
    property_name = "invertible Sigma = [sigma, lambda*phi]"


class NonpositivePrice(ConfigurationError):
    property_name = "positive asset prices on the tree"


class BadJumpSize(ConfigurationError):
    property_name = "jump sizes phi > -1"


class JumpPremiumOutOfRange(ConfigurationError):
    property_name = "jump premium 1 + gamma > 0"


class DimensionMismatch(ConfigurationError):
    property_name = "market dimensions match the lattice (d + p assets)"


# CLI


class RefinementError(ConfigurationError):
    property_name = "refinement list halves the time step"
