"""Command-line front end.

    robustbsde solve --config small.json
    robustbsde verify --config small.json --threads 4
    robustbsde optimal-plan --config small.json --x 2 --utility power:0.5
    robustbsde log-case | market-demo | convergence --config small.json

Every command writes CSV files into ``--out-dir``. Exit codes: 0 ok,
2 configuration error, 3 numerical failure or failed check, 4 no convergence.
"""

import argparse
import logging
import sys
from collections.abc import Sequence
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from robustbsde.bsdej import (
    Scheme,
    closed_form_delta0,
    recursion_residuals,
    solve_criterion,
    verify_K_martingale,
)
from robustbsde.config import (
    ExperimentConfig,
    build_criterion,
    build_lattice_from,
    build_market_from,
    build_problem,
    get_log_level,
)
from robustbsde.convergence import refinement_study, write_convergence
from robustbsde.errors import ConfigurationError, NoConvergence, NumericalError
from robustbsde.lattice import AdaptedProcess, Lattice
from robustbsde.log_case import AlphaMethod, alpha_solve, j_spread, solve_log_case
from robustbsde.market import (
    budget_identity_gap,
    check_admissible,
    market_price_of_risk,
    martingale_residual,
    wealth_path,
)
from robustbsde.max_principle import solve_optimal_plan
from robustbsde.measure import (
    EntropyForm,
    GirsanovTilt,
    beta_reduce,
    criterion_gamma,
    export_measure,
    tilt_to_measure,
)
from robustbsde.reports import write_solution, write_summary, write_table
from robustbsde.verification import run_suite, write_report

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_NO_CONVERGENCE = 4
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    """Read the experiment file (or defaults) and apply command-line overrides."""
    config = ExperimentConfig() if args.config is None else ExperimentConfig.load(args.config)
    data = config.model_dump(mode="json", by_alias=True)
    run = data["run"]
    for flag in ("threads", "seed", "out_dir"):
        value = getattr(args, flag, None)
        if value is not None:
            run[flag] = value
    if getattr(args, "refinements", None):
        run["refinements"] = args.refinements
    opt = data["optimization"]
    for flag, key in (
        ("x", "capital"),
        ("utility", "utility"),
        ("scheme", "scheme"),
        ("tol", "tol"),
        ("max_iter", "max_iter"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            opt[key] = value
    return ExperimentConfig.model_validate(data)


def _out_dir(config: ExperimentConfig) -> Path:
    path = Path(config.run.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _solver_options(config: ExperimentConfig) -> dict:
    opt = config.optimization
    return {
        "tol": opt.tol,
        "damping": opt.damping,
        "fixed_point_tol": opt.fixed_point_tol,
        "max_iter": opt.max_iter,
        "history": opt.mixing_history,
        "adaptive": opt.adaptive_damping,
    }


def _max_gap(first: Sequence[np.ndarray], second: Sequence[np.ndarray]) -> float:
    return max(float(np.max(np.abs(a - b))) for a, b in zip(first, second))


def cmd_solve(config: ExperimentConfig) -> int:
    lattice = build_lattice_from(config)
    spec = build_criterion(config, lattice)
    dp = solve_criterion(spec, lattice, Scheme.DP)
    recursion = solve_criterion(spec, lattice, Scheme.RECURSION)
    out = _out_dir(config)
    write_solution(out / "solution_dp.csv", dp)
    write_solution(out / "solution_recursion.csv", recursion)
    export_measure(dp.qstar, out / "nodes.csv")

    beta = spec.beta
    form = config.criterion.entropy_form
    gamma = criterion_gamma(spec, dp.qstar, lattice, EntropyForm.STEPWISE_KL)
    summary: dict[str, object] = {
        "steps": lattice.steps,
        "leaves": lattice.leaf_count,
        "beta": beta,
        "Y0_dp": beta * dp.initial_value,
        "Y0_recursion": beta * recursion.initial_value,
        "scheme_gap": beta * abs(dp.initial_value - recursion.initial_value),
        "recursion_residual_recursion": recursion_residuals(recursion),
        "recursion_residual_dp": recursion_residuals(dp),
        "k_martingale_residual": verify_K_martingale(recursion),
        "gamma_at_qstar_gap": abs(gamma - beta * dp.initial_value),
        f"gamma_at_qstar_{form.value}": criterion_gamma(spec, dp.qstar, lattice, form),
    }
    if spec.discount.is_zero:
        reduced = beta_reduce(spec)
        closed = closed_form_delta0(lattice, reduced.cost, reduced.terminal)
        summary["closed_form_gap"] = _max_gap(dp.values, closed.values)
    write_summary(out / "summary.csv", summary)
    logger.info(f"Y_0 = {summary['Y0_dp']:.12g} (dp), {summary['Y0_recursion']:.12g} (recursion)")
    return EXIT_OK


def cmd_verify(config: ExperimentConfig, corrupt: bool = False) -> int:
    lattice = build_lattice_from(config)
    spec = build_criterion(config, lattice)
    run = config.run
    results = run_suite(
        lattice,
        spec,
        grid_step=run.grid_step,
        trials=run.trials,
        samples=run.random_search_samples,
        seed=run.seed,
        threads=run.threads,
        corrupt=corrupt,
    )
    write_report(_out_dir(config) / "oracle_report.csv", results)
    failed = [r for r in results if not r.passed]
    for r in failed:
        print(f"check {r.check} failed: {r.property} (gap {r.gap:.6g})", file=sys.stderr)
    return EXIT_NUMERICAL if failed else EXIT_OK


def _plan_rows(lattice: Lattice, consumption: AdaptedProcess, terminal: np.ndarray):
    for k in range(lattice.steps + 1):
        for node in range(lattice.node_count(k)):
            leaf = terminal[node] if k == lattice.steps else None
            yield [k, node, consumption[k][node], leaf]


def cmd_optimal_plan(config: ExperimentConfig) -> int:
    lattice = build_lattice_from(config)
    problem = build_problem(config, lattice)
    optimal = solve_optimal_plan(
        problem, scheme=config.optimization.scheme, **_solver_options(config)
    )
    out = _out_dir(config)
    plan = optimal.plan
    write_table(
        out / "plan.csv",
        ["time_index", "node_id", "consumption", "terminal"],
        _plan_rows(lattice, plan.consumption, plan.terminal),
    )
    write_summary(
        out / "summary.csv",
        {
            "capital": problem.capital,
            "utility": problem.utility.label(),
            "terminal_utility": problem.terminal_utility.label(),
            "scheme": optimal.solution.scheme.value,
            "nu": optimal.nu,
            "value": optimal.value,
            "budget": optimal.budget,
            "budget_gap": abs(optimal.budget - problem.capital),
            "stationarity": optimal.stationarity,
            "fixed_point_iterations": optimal.iterations,
            "budget_evaluations": optimal.evaluations,
        },
    )
    return EXIT_OK


def _closed_form_alpha(rates: np.ndarray, times: np.ndarray, horizon: float) -> np.ndarray | None:
    """(1 - e^{-δ(T-t)})/δ for a constant rate, T - t when it is zero."""
    if rates.size == 0 or np.any(rates != rates[0]):
        return None
    rate = float(rates[0])
    remaining = horizon - times
    if rate == 0:
        return remaining
    return -np.expm1(-rate * remaining) / rate


def cmd_log_case(config: ExperimentConfig) -> int:
    lattice = build_lattice_from(config)
    problem = build_problem(config, lattice)
    market = build_market_from(config, lattice)
    tilt = GirsanovTilt.zero(lattice) if market is None else market_price_of_risk(market).tilt()
    opt = config.optimization
    solution = solve_log_case(
        problem, tilt, opt.alpha_method, opt.scheme, **_solver_options(config)
    )

    out = _out_dir(config)
    times = lattice.grid.times
    rates = problem.discount.deterministic_rates()
    alphas = {m: alpha_solve(rates, lattice.step, m) for m in AlphaMethod}
    closed = _closed_form_alpha(rates, times, lattice.grid.horizon)
    write_table(
        out / "alpha_k.csv",
        ["time_index", "t", "alpha", "k", "alpha_exact", "alpha_euler", "alpha_lattice",
         "alpha_closed_form"],
        (
            [n, times[n], solution.alpha[n], solution.k[n],
             alphas[AlphaMethod.EXACT][n], alphas[AlphaMethod.EULER][n],
             alphas[AlphaMethod.LATTICE][n], None if closed is None else closed[n]]
            for n in range(lattice.steps + 1)
        ),
    )
    write_table(
        out / "J_compare.csv",
        ["time_index", "t", "J_ode", "J_extracted_mean", "spread", "std"],
        (
            [s.time_index, times[s.time_index], solution.j_ode[s.time_index], s.mean, s.spread,
             s.std]
            for s in j_spread(solution.j, lattice)
        ),
    )
    write_summary(
        out / "reconstruction.csv",
        {
            "alpha_method": AlphaMethod(opt.alpha_method).value,
            "nu": solution.optimal.nu,
            "value": solution.optimal.value,
            "reconstruction_residual": solution.residual,
            "max_one_plus_k_times_one_plus_alpha_error": float(
                np.max(np.abs((1.0 + solution.k) * (1.0 + solution.alpha) - 1.0))
            ),
            "pbar_martingale_residual": solution.pbar.martingale_residual(),
        },
    )
    return EXIT_OK


def cmd_market_demo(config: ExperimentConfig) -> int:
    """Prices, prices of risk, and the wealth of holding one share of every asset."""
    lattice = build_lattice_from(config)
    market = build_market_from(config, lattice)
    if market is None:
        raise ConfigurationError("market-demo needs a 'market' section in the config")
    premia = market_price_of_risk(market)
    pricing = tilt_to_measure(premia.tilt(), lattice)
    n = market.asset_count
    out = _out_dir(config)

    write_table(
        out / "prices.csv",
        ["time_index", "node_id", *(f"S_{i + 1}" for i in range(n))],
        (
            [k, node, *market.prices[k][node]]
            for k in range(lattice.steps + 1)
            for node in range(lattice.node_count(k))
        ),
    )
    write_table(
        out / "risk_premia.csv",
        ["name", "index", "value"],
        [
            *(["theta", m + 1, v] for m, v in enumerate(premia.theta)),
            *(["gamma", j + 1, v] for j, v in enumerate(premia.gamma)),
            *(["z", j + 1, v] for j, v in enumerate(premia.z)),
        ],
    )
    capital = config.optimization.capital
    holdings = [np.ones(n)] * lattice.steps
    consumption = AdaptedProcess(
        tuple(np.zeros(lattice.node_count(k)) for k in range(lattice.steps + 1))
    )
    wealth = wealth_path(capital, holdings, consumption, market)
    write_table(
        out / "wealth.csv",
        ["time_index", "node_id", "wealth"],
        (
            [k, node, wealth[k][node]]
            for k in range(lattice.steps + 1)
            for node in range(lattice.node_count(k))
        ),
    )
    admissible = check_admissible(wealth)
    write_summary(
        out / "summary.csv",
        {
            "condition_number": market.condition_number,
            "martingale_residual": martingale_residual(market, pricing),
            "budget_identity_gap": budget_identity_gap(
                capital, holdings, consumption, market, pricing
            ),
            "admissible": admissible.admissible,
            "first_violation": (
                "" if admissible.first_violation is None
                else "{}:{}".format(*admissible.first_violation)
            ),
        },
    )
    return EXIT_OK


def cmd_convergence(config: ExperimentConfig) -> int:
    rows = refinement_study(config, config.run.refinements)
    write_convergence(_out_dir(config) / "convergence.csv", rows)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment file (defaults if omitted)")
    common.add_argument("--out-dir", dest="out_dir", help="output directory (default: out)")
    common.add_argument(
        "--threads", type=int, help="worker threads (default: ROBUSTBSDE_THREADS or 1)"
    )
    common.add_argument("--seed", type=int, help="random seed for verification (default: 0)")

    parser = argparse.ArgumentParser(
        prog="robustbsde",
        description="Entropy-penalized robust utility on jump-diffusion lattices.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="solve the BSDE under both schemes")
    verify = sub.add_parser("verify", parents=[common], help="run the oracle check suite")
    verify.add_argument("--corrupt-solver", action="store_true", help=argparse.SUPPRESS)

    plan = sub.add_parser("optimal-plan", parents=[common], help="solve the budget problem")
    plan.add_argument("--x", type=float, help="initial capital (default: 1.0)")
    plan.add_argument("--utility", help="log or power:<gamma> (default: log)")
    plan.add_argument("--scheme", choices=[s.value for s in Scheme], help="default: dp")
    plan.add_argument("--tol", type=float, help="budget tolerance (default: 1e-8)")
    plan.add_argument("--max-iter", dest="max_iter", type=int, help="default: 500")

    sub.add_parser("log-case", parents=[common], help="log utility decomposition")
    sub.add_parser("market-demo", parents=[common], help="prices, risk premia and wealth")
    convergence = sub.add_parser(
        "convergence", parents=[common], help="refinement study of discretization gaps"
    )
    convergence.add_argument(
        "--refinements", type=int, nargs="+", help="step counts, each double the last (4 8 16)"
    )
    return parser


COMMANDS = {
    "solve": cmd_solve,
    "optimal-plan": cmd_optimal_plan,
    "log-case": cmd_log_case,
    "market-demo": cmd_market_demo,
    "convergence": cmd_convergence,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=get_log_level(), format=LOG_FORMAT)
    try:
        config = load_config(args)
        if args.command == "verify":
            return cmd_verify(config, corrupt=args.corrupt_solver)
        return COMMANDS[args.command](config)
    except NoConvergence as e:
        print(f"error: {e.describe()} (last residual {e.residual:.3g})", file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    except NumericalError as e:
        print(f"error: {e.describe()}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ConfigurationError as e:
        print(f"error: {e.describe()}", file=sys.stderr)
        return EXIT_CONFIG
    except ValidationError as e:
        print(f"error: invalid configuration: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"error: cannot read or write files: {e}", file=sys.stderr)
        return EXIT_CONFIG
