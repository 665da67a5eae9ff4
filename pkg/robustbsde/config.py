"""Pydantic schemas for experiment files, plus builders for the numerical objects they describe."""

import logging
import os
from collections.abc import Callable
from pathlib import Path
from tokenize import TokenError

import numpy as np
import sympy
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from sympy.parsing.sympy_parser import parse_expr, standard_transformations

from robustbsde.bsdej import Scheme
from robustbsde.errors import ConfigurationError
from robustbsde.lattice import (
    AdaptedProcess,
    DiscountSpec,
    Lattice,
    NodeState,
    TimeGrid,
    adapted_from_fn,
    build_lattice,
    discount_process,
)
from robustbsde.log_case import AlphaMethod
from robustbsde.market import Market, build_market, market_price_of_risk
from robustbsde.max_principle import BudgetProblem
from robustbsde.measure import CriterionSpec, EntropyForm, NodeMeasure, tilt_to_measure
from robustbsde.preferences import UtilitySpec

logger = logging.getLogger(__name__)

DEFAULT_THREADS = 1
MAX_THREADS = 64
DEFAULT_LOG_LEVEL = "INFO"
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


def get_default_threads() -> int:
    """Worker count from ROBUSTBSDE_THREADS, clamped to [1, MAX_THREADS]."""
    raw = os.getenv("ROBUSTBSDE_THREADS", str(DEFAULT_THREADS))
    try:
        val = int(raw)
        return max(1, min(MAX_THREADS, val))
    except ValueError:
        return DEFAULT_THREADS


def get_log_level() -> str:
    """Log level from ROBUSTBSDE_LOG_LEVEL; unknown names fall back to INFO."""
    raw = os.getenv("ROBUSTBSDE_LOG_LEVEL", DEFAULT_LOG_LEVEL).strip().upper()
    return raw if raw in LOG_LEVELS else DEFAULT_LOG_LEVEL


def _as_expression(v: object) -> str:
    if isinstance(v, bool):
        raise ValueError("expressions must be numbers or strings")
    if isinstance(v, (int, float)):
        return repr(float(v))
    if isinstance(v, str) and v.strip():
        return v.strip()
    raise ValueError("expressions must be numbers or non-empty strings")


class LatticeConfig(BaseModel):
    """Time grid, dimensions and jump intensities of the tree."""

    model_config = ConfigDict(extra="forbid")

    horizon: float = Field(default=1.0, gt=0, description="Horizon T")
    steps: int = Field(default=3, ge=1, le=24, description="Number of time steps K")
    brownian_dim: int = Field(default=1, ge=0, le=4, description="Brownian coordinates p")
    jump_channels: int = Field(default=0, ge=0, le=4, description="Counting processes d")
    intensity: list[str] = Field(
        default_factory=list,
        description="One expression per jump channel in t, T, W1..Wp, H1..Hd",
    )
    single_path: bool = Field(default=False, description="Allow p = d = 0 (deterministic tree)")

    @model_validator(mode="before")
    @classmethod
    def channel_objects(cls, data: object) -> object:
        """Accept ``jump_channels: [{"intensity": ...}, ...]`` as well as a count."""
        if not isinstance(data, dict) or not isinstance(data.get("jump_channels"), list):
            return data
        channels = data["jump_channels"]
        if "intensity" in data:
            raise ValueError("give intensities either per channel or as a list, not both")
        intensities = []
        for i, channel in enumerate(channels, start=1):
            if not isinstance(channel, dict) or set(channel) != {"intensity"}:
                raise ValueError(f"jump channel {i} must be an object with one 'intensity' key")
            intensities.append(channel["intensity"])
        return {**data, "jump_channels": len(channels), "intensity": intensities}

    @field_validator("intensity", mode="before")
    @classmethod
    def intensity_to_list(cls, v: object) -> list[str]:
        """Accept a single expression or number for one channel."""
        if v is None:
            return []
        if isinstance(v, (str, int, float)):
            return [_as_expression(v)]
        return [_as_expression(item) for item in v]

    @model_validator(mode="after")
    def intensity_per_channel(self) -> "LatticeConfig":
        if len(self.intensity) != self.jump_channels:
            raise ValueError(
                f"need {self.jump_channels} intensity expressions, got {len(self.intensity)}"
            )
        return self


class CriterionConfig(BaseModel):
    """Cost U, terminal utility Ū_T, discount rate δ and penalty weight β."""

    model_config = ConfigDict(extra="forbid")

    cost: str = Field(default="0", description="U(t, W, H)")
    terminal: str = Field(default="0", description="Ū_T(W, H) on the leaves")
    discount: str = Field(default="0.1", description="δ(t, W, H), or 'zero' for δ = 0")
    zero_discount: bool = Field(default=False, description="Accept δ = 0 somewhere")
    beta: float = Field(default=1.0, gt=0)
    entropy_form: EntropyForm = EntropyForm.STEPWISE_KL

    @field_validator("cost", "terminal", "discount", mode="before")
    @classmethod
    def number_to_expression(cls, v: object) -> str:
        return _as_expression(v)

    @model_validator(mode="after")
    def zero_literal(self) -> "CriterionConfig":
        """'zero' switches the discount to δ = 0 with the zero flag set."""
        if self.discount.lower() == "zero":
            self.discount = "0"
            self.zero_discount = True
        return self


class MarketConfig(BaseModel):
    """Example jump-diffusion market; matrices are row-major with d + p rows."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    mu: list[float]
    sigma: list[float] = Field(default_factory=list)
    phi: list[float] = Field(default_factory=list)
    intensity: list[float] | None = Field(
        default=None, alias="lambda", description="Must match the lattice intensities if given"
    )
    initial_prices: list[float] | None = None

    @field_validator("phi")
    @classmethod
    def jump_sizes_above_minus_one(cls, v: list[float]) -> list[float]:
        if any(x <= -1.0 for x in v):
            raise ValueError("jump sizes phi must exceed -1")
        return v


class OptimizationConfig(BaseModel):
    """Outer problem: capital, utilities and solver controls."""

    model_config = ConfigDict(extra="forbid")

    capital: float = Field(default=1.0, gt=0, description="Initial capital x")
    utility: str = Field(default="log", description="log or power:<gamma>")
    terminal_utility: str = Field(default="none", description="log, power:<gamma> or none")
    scheme: Scheme = Scheme.DP
    damping: float = Field(default=0.5, gt=0, le=1)
    tol: float = Field(default=1e-8, gt=0, description="Budget tolerance |f(nu) - x|")
    fixed_point_tol: float = Field(default=1e-10, gt=0)
    max_iter: int = Field(default=500, ge=1)
    mixing_history: int = Field(
        default=5, ge=0, le=50, description="Anderson mixing depth (0 = plain damped iteration)"
    )
    adaptive_damping: bool = Field(
        default=True, description="Halve the damping when the residual grows"
    )
    alpha_method: AlphaMethod = AlphaMethod.LATTICE

    @field_validator("utility", "terminal_utility", mode="before")
    @classmethod
    def known_utility(cls, v: object) -> str:
        text = str(v).strip().lower()
        UtilitySpec.parse(text)
        return text

    @field_validator("utility")
    @classmethod
    def running_utility_defined(cls, v: str) -> str:
        if v == "none":
            raise ValueError("the running utility cannot be 'none'")
        return v


class RunConfig(BaseModel):
    """Reproducibility and verification controls."""

    model_config = ConfigDict(extra="forbid")

    seed: int = Field(default=0, ge=0)
    threads: int = Field(default_factory=get_default_threads, ge=1, le=MAX_THREADS)
    out_dir: str = "out"
    grid_step: float = Field(default=0.01, gt=0, le=0.1, description="Per-node oracle grid")
    trials: int = Field(default=20, ge=1, description="Randomized trials per verify check")
    random_search_samples: int = Field(default=2000, ge=1)
    refinements: list[int] = Field(default_factory=lambda: [4, 8, 16])


class ExperimentConfig(BaseModel):
    """Root of an experiment file."""

    model_config = ConfigDict(extra="forbid")

    lattice: LatticeConfig = Field(default_factory=LatticeConfig)
    criterion: CriterionConfig = Field(default_factory=CriterionConfig)
    market: MarketConfig | None = None
    optimization: OptimizationConfig = Field(default_factory=OptimizationConfig)
    run: RunConfig = Field(default_factory=RunConfig)

    @model_validator(mode="after")
    def market_intensity_matches_lattice(self) -> "ExperimentConfig":
        """A market lambda block must repeat the (constant) lattice intensities."""
        if self.market is None or self.market.intensity is None:
            return self
        try:
            lattice_rates = [float(text) for text in self.lattice.intensity]
        except ValueError:
            raise ValueError("market lambda needs constant lattice intensities") from None
        if lattice_rates != [float(x) for x in self.market.intensity]:
            raise ValueError("market lambda disagrees with lattice intensity")
        return self

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.model_validate_json(Path(path).read_text())


def compile_expression(
    text: str, horizon: float, brownian_dim: int, jump_channels: int
) -> Callable[[float, NodeState], np.ndarray]:
    """Parse an expression in t, T, W1..Wp, H1..Hd and vectorize it over a time slice."""
    t, big_t = sympy.symbols("t T")
    brownian = sympy.symbols(f"W1:{brownian_dim + 1}") if brownian_dim else ()
    jumps = sympy.symbols(f"H1:{jump_channels + 1}") if jump_channels else ()
    names = {str(s): s for s in (t, big_t, *brownian, *jumps)}
    try:
        expr = parse_expr(text, local_dict=names, transformations=standard_transformations)
    except (SyntaxError, TokenError, TypeError) as e:
        raise ConfigurationError(f"cannot parse expression {text!r}: {e}") from e
    unknown = {str(s) for s in getattr(expr, "free_symbols", set())} - set(names)
    if unknown:
        raise ConfigurationError(
            f"expression {text!r} uses unknown symbols {sorted(unknown)}; "
            f"allowed: {', '.join(names)}"
        )
    fn = sympy.lambdify([t, big_t, *brownian, *jumps], expr, "numpy")

    def evaluate(time: float, state: NodeState) -> np.ndarray:
        return np.asarray(
            fn(time, horizon, *state.brownian.T, *state.jumps.T), dtype=float
        )

    return evaluate


def _compile(config: ExperimentConfig, text: str) -> Callable[[float, NodeState], np.ndarray]:
    lat = config.lattice
    return compile_expression(text, lat.horizon, lat.brownian_dim, lat.jump_channels)


def build_lattice_from(config: ExperimentConfig, steps: int | None = None) -> Lattice:
    lat = config.lattice
    grid = TimeGrid(lat.horizon, lat.steps if steps is None else steps)
    intensity_fn = None
    if lat.jump_channels:
        channels = [_compile(config, text) for text in lat.intensity]

        def intensity_fn(time: float, state: NodeState) -> np.ndarray:
            return np.column_stack(
                [np.broadcast_to(f(time, state), (state.size,)) for f in channels]
            )

    return build_lattice(
        grid, lat.brownian_dim, lat.jump_channels, intensity_fn, single_path=lat.single_path
    )


def build_discount(config: ExperimentConfig, lattice: Lattice) -> DiscountSpec:
    rate = adapted_from_fn(_compile(config, config.criterion.discount), lattice)
    return discount_process(rate, lattice, allow_zero=config.criterion.zero_discount)


def build_criterion(
    config: ExperimentConfig, lattice: Lattice, discount: DiscountSpec | None = None
) -> CriterionSpec:
    crit = config.criterion
    cost: AdaptedProcess = adapted_from_fn(_compile(config, crit.cost), lattice)
    terminal = adapted_from_fn(_compile(config, crit.terminal), lattice).leaves
    return CriterionSpec(
        cost=cost,
        terminal=terminal,
        discount=build_discount(config, lattice) if discount is None else discount,
        beta=crit.beta,
    )


def build_market_from(config: ExperimentConfig, lattice: Lattice) -> Market | None:
    if config.market is None:
        return None
    m = config.market
    return build_market(m.mu, m.sigma, m.phi, lattice, m.initial_prices)


def build_pricing(config: ExperimentConfig, lattice: Lattice) -> NodeMeasure:
    """P̃ from the market's prices of risk, or P itself without a market."""
    market = build_market_from(config, lattice)
    if market is None:
        return NodeMeasure.base(lattice)
    return tilt_to_measure(market_price_of_risk(market).tilt(), lattice)


def build_problem(
    config: ExperimentConfig, lattice: Lattice, capital: float | None = None
) -> BudgetProblem:
    opt = config.optimization
    return BudgetProblem(
        capital=opt.capital if capital is None else capital,
        pricing=build_pricing(config, lattice),
        discount=build_discount(config, lattice),
        utility=UtilitySpec.parse(opt.utility),
        terminal_utility=UtilitySpec.parse(opt.terminal_utility),
    )
