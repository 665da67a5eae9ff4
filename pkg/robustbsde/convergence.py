"""Refinement studies: how discretization gaps shrink as the time step halves."""

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

from robustbsde.bsdej import Scheme, implied_tilt, recursion_residuals, solve_criterion
from robustbsde.config import (
    ExperimentConfig,
    build_criterion,
    build_lattice_from,
    build_problem,
)
from robustbsde.errors import RefinementError
from robustbsde.lattice import MAX_LATTICE_LEAVES, Lattice, lattice_size
from robustbsde.log_case import (
    AlphaMethod,
    alpha_solve,
    cstar_forward,
    extract_J,
    j_spread,
)
from robustbsde.max_principle import solve_fixed_point
from robustbsde.preferences import UtilityKind, UtilitySpec
from robustbsde.reports import write_table

logger = logging.getLogger(__name__)

CONVERGENCE_HEADER = ["quantity", "steps", "delta", "value", "gap", "ratio"]
MAX_REFINEMENT_LEAVES = MAX_LATTICE_LEAVES


@dataclass(frozen=True)
class RefinementRow:
    quantity: str
    steps: int
    delta: float
    value: float
    gap: float
    ratio: float | None = None

    def row(self) -> list[object]:
        return [self.quantity, self.steps, self.delta, self.value, self.gap, self.ratio]


def check_refinements(steps_list: Sequence[int]) -> list[int]:
    """Refinements must be positive and each must double the previous step count."""
    steps = [int(s) for s in steps_list]
    if not steps:
        raise RefinementError("need at least one refinement")
    if steps[0] < 1:
        raise RefinementError(f"step counts must be positive, got {steps[0]}")
    for coarse, fine in zip(steps, steps[1:]):
        if fine != 2 * coarse:
            raise RefinementError(
                f"refinements must halve the time step: {coarse} -> {fine} does not double"
            )
    return steps


def _log_case_applies(config: ExperimentConfig) -> bool:
    opt = config.optimization
    return (
        UtilitySpec.parse(opt.utility).kind is UtilityKind.LOG
        and UtilitySpec.parse(opt.terminal_utility).is_none
    )


def _j_spread_at(config: ExperimentConfig, lattice: Lattice) -> tuple[float, float]:
    """J at the root and its worst per-slice weighted spread, at the fixed point for ν = 1."""
    problem = build_problem(config, lattice)
    if not problem.discount.is_deterministic:
        raise RefinementError("the J spread study needs a deterministic discount rate")
    opt = config.optimization
    result = solve_fixed_point(
        1.0,
        problem,
        opt.damping,
        opt.fixed_point_tol,
        opt.max_iter,
        Scheme.DP,
        history=opt.mixing_history,
        adaptive=opt.adaptive_damping,
    )
    cstar = cstar_forward(1.0, result.solution.qstar, problem.pricing, problem.discount)
    alpha = alpha_solve(problem.discount.deterministic_rates(), lattice.step, AlphaMethod.EXACT)
    j = extract_J(result.solution.as_process(), cstar, alpha)
    spreads = j_spread(j, lattice)
    return spreads[0].mean, max(s.std for s in spreads)


def check_refinement_size(config: ExperimentConfig, steps: int) -> int:
    """Leaf count of the refined tree, refused before anything is built."""
    lat = config.lattice
    leaves = lattice_size(lat.brownian_dim, lat.jump_channels, steps)
    if leaves > MAX_REFINEMENT_LEAVES:
        raise RefinementError(
            f"{steps} steps give {leaves} leaves (limit {MAX_REFINEMENT_LEAVES}); "
            "use fewer refinements or a smaller branching"
        )
    return leaves


def _measure(config: ExperimentConfig, steps: int) -> list[tuple[str, float, float]]:
    lattice = build_lattice_from(config, steps)
    spec = build_criterion(config, lattice)
    dp = solve_criterion(spec, lattice, Scheme.DP)
    recursion = solve_criterion(spec, lattice, Scheme.RECURSION)
    value = spec.beta * dp.initial_value
    quantities = [
        ("scheme_gap", value, spec.beta * abs(dp.initial_value - recursion.initial_value)),
        ("recursion_residual", value, recursion_residuals(dp)),
    ]
    tilt = implied_tilt(dp, 0)
    if lattice.brownian_dim:
        quantities.append(("drift_error", value, tilt.drift_error))
    if lattice.jump_channels:
        quantities.append(("ratio_error", value, tilt.ratio_error))
    if _log_case_applies(config):
        root, spread = _j_spread_at(config, lattice)
        quantities.append(("j_spread", root, spread))
    return quantities


def refinement_study(config: ExperimentConfig, steps_list: Sequence[int]) -> list[RefinementRow]:
    """One row per quantity and refinement; ratio is gap(coarser) / gap(this)."""
    steps = check_refinements(steps_list)
    for count in steps:
        check_refinement_size(config, count)
    horizon = config.lattice.horizon
    previous: dict[str, float] = {}
    rows: list[RefinementRow] = []
    for count in steps:
        delta = horizon / count
        for quantity, value, gap in _measure(config, count):
            before = previous.get(quantity)
            ratio = before / gap if before is not None and gap > 0 else None
            rows.append(RefinementRow(quantity, count, delta, value, gap, ratio))
            previous[quantity] = gap
        logger.info(f"Refinement K={count} (delta={delta:.6g}) done")
    rows.sort(key=lambda r: (r.quantity, r.steps))
    return rows


def write_convergence(path: Path, rows: Sequence[RefinementRow]) -> Path:
    return write_table(path, CONVERGENCE_HEADER, (r.row() for r in rows))
