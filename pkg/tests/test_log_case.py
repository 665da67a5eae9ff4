"""Tests for the log-utility decomposition V = alpha ln c* + (1 + alpha) J."""

import math

import numpy as np
import pytest

from robustbsde.errors import (
    ConfigurationError,
    NonDeterministicCoefficients,
    NonpositiveNu,
    Singular,
)
from robustbsde.lattice import (
    TimeGrid,
    adapted_from_fn,
    build_lattice,
    constant_intensity,
    constant_process,
    discount_process,
)
from robustbsde.log_case import (
    AlphaMethod,
    alpha_residual,
    alpha_solve,
    cstar_forward,
    deterministic_rates,
    j_spread,
    kfun,
    pbar_measure,
    solve_J_ode,
    solve_log_case,
)
from robustbsde.max_principle import BudgetProblem
from robustbsde.measure import GirsanovTilt, NodeMeasure, tilt_to_measure
from robustbsde.preferences import UtilitySpec

TILT = GirsanovTilt([0.25], [0.2])


@pytest.fixture
def lattice():
    return build_lattice(TimeGrid(1.0, 3), 1, 1, constant_intensity(0.5))


@pytest.fixture
def log_problem(lattice):
    return BudgetProblem(
        capital=1.0,
        pricing=tilt_to_measure(TILT, lattice),
        discount=discount_process(constant_process(0.2, lattice), lattice),
        utility=UtilitySpec.parse("log"),
        terminal_utility=UtilitySpec.parse("none"),
    )


@pytest.mark.parametrize("steps", [1, 4, 16])
def test_exact_alpha_matches_closed_form(steps):
    """delta = 1, T = 1: alpha(0) = 1 - e^{-1} for any number of steps."""
    alpha = alpha_solve(np.ones(steps), 1.0 / steps, AlphaMethod.EXACT)
    assert alpha[0] == pytest.approx(1.0 - math.exp(-1.0), abs=1e-10)
    assert alpha[-1] == 0.0
    assert np.all(alpha[:-1] > 0)


def test_exact_alpha_without_discount():
    """delta = 0 gives alpha(t) = T - t."""
    alpha = alpha_solve(np.zeros(4), 0.25, AlphaMethod.EXACT)
    assert alpha == pytest.approx([1.0, 0.75, 0.5, 0.25, 0.0])


def test_euler_alpha_solves_discrete_equation():
    """Implicit Euler leaves no residual in the discrete equation."""
    rates = np.array([0.5, 1.0, 0.2, 0.3])
    alpha = alpha_solve(rates, 0.25, AlphaMethod.EULER)
    assert alpha_residual(alpha, rates, 0.25) <= 1e-12
    exact = alpha_solve(rates, 0.25, AlphaMethod.EXACT)
    assert alpha_residual(exact, rates, 0.25) > 1e-6


def test_alpha_rejects_negative_rates():
    """Discount rates are nonnegative."""
    with pytest.raises(ConfigurationError):
        alpha_solve(np.array([-0.1]), 1.0)


def test_k_identity():
    """(1 + k)(1 + alpha) = 1; alpha = -1 is singular."""
    alpha = alpha_solve(np.full(8, 0.7), 0.125)
    k = kfun(alpha)
    assert np.max(np.abs((1.0 + k) * (1.0 + alpha) - 1.0)) <= 1e-14
    with pytest.raises(Singular):
        kfun(-1.0)


def test_deterministic_rates_required(lattice):
    """A state-dependent discount cannot be used here."""
    rate = adapted_from_fn(lambda t, s: 0.1 + 0.1 * s.jumps[:, 0], lattice)
    with pytest.raises(NonDeterministicCoefficients):
        deterministic_rates(discount_process(rate, lattice))


def test_j_ode_vanishes_without_tilt_or_discount():
    """With theta = z = 0 and delta = 0 the source is zero, so J = 0."""
    alpha = alpha_solve(np.zeros(4), 0.25)
    j = solve_J_ode(np.zeros(4), np.array([0.5]), np.zeros(1), np.zeros(1), 0.25, alpha)
    assert j == pytest.approx(np.zeros(5))


def test_pbar_is_a_measure(lattice):
    """The auxiliary measure is equivalent to P."""
    alpha = alpha_solve(np.full(3, 0.2), lattice.step)
    pbar = pbar_measure(kfun(alpha), TILT, lattice)
    assert pbar.is_equivalent()
    assert pbar.martingale_residual() < 1e-12


def test_cstar_needs_positive_nu(lattice):
    """c* is only defined for nu > 0."""
    base = NodeMeasure.base(lattice)
    discount = discount_process(constant_process(0.2, lattice), lattice)
    with pytest.raises(NonpositiveNu):
        cstar_forward(0.0, base, base, discount)


def test_j_spread_of_constant_process(lattice):
    """A node-independent process has zero spread."""
    rows = j_spread(constant_process(1.5, lattice), lattice)
    assert [r.spread for r in rows] == [0.0] * 4
    assert rows[2].mean == pytest.approx(1.5)


def test_log_case_decomposition(log_problem):
    """Lattice alpha makes J node-independent under dp, with J_T = 0."""
    solution = solve_log_case(log_problem, TILT, AlphaMethod.LATTICE)
    assert solution.residual <= 1e-12
    assert solution.j.leaves == pytest.approx(np.zeros(log_problem.lattice.leaf_count))
    for row in j_spread(solution.j, log_problem.lattice):
        assert row.spread <= 1e-7
    beta = solution.beta_process
    assert beta[0][0] == pytest.approx((1.0 + solution.alpha[0]) * solution.j[0][0])
    assert np.all(np.isfinite(solution.j_ode))


def test_log_case_requires_log_utility(log_problem):
    """Power utility is refused."""
    power = BudgetProblem(
        capital=1.0,
        pricing=log_problem.pricing,
        discount=log_problem.discount,
        utility=UtilitySpec.parse("power:0.5"),
        terminal_utility=UtilitySpec.parse("none"),
    )
    with pytest.raises(ConfigurationError, match="log utility"):
        solve_log_case(power, TILT)
