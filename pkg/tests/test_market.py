"""Tests for the lattice market: prices, risk premia and self-financing wealth."""

import math

import numpy as np
import pytest

from robustbsde.errors import (
    BadJumpSize,
    DimensionMismatch,
    NonpositivePrice,
    SingularSigma,
)
from robustbsde.lattice import TimeGrid, build_lattice, constant_intensity, constant_process
from robustbsde.market import (
    budget_identity_gap,
    build_market,
    check_admissible,
    market_price_of_risk,
    martingale_residual,
    wealth_path,
)
from robustbsde.measure import tilt_to_measure

MU = [0.05, 0.02]
SIGMA = [[0.2], [0.1]]
PHI = [[0.5], [-0.2]]


def _lattice(horizon: float = 1.0, steps: int = 2):
    return build_lattice(TimeGrid(horizon, steps), 1, 1, constant_intensity(0.3))


@pytest.fixture
def market():
    return build_market(MU, SIGMA, PHI, _lattice())


def test_big_sigma_and_determinant(market):
    """Sigma = [sigma, lambda phi] with determinant -0.027."""
    assert market.big_sigma == pytest.approx(np.array([[0.2, 0.15], [0.1, -0.06]]))
    assert np.linalg.det(market.big_sigma) == pytest.approx(-0.027)
    assert market.condition_number > 1


def test_prices_propagate_from_one(market):
    """Every slice has one row of prices per node, starting from 1."""
    assert market.prices[0] == pytest.approx(np.ones((1, 2)))
    assert market.prices[2].shape == (16, 2)
    assert np.all(market.prices[2] > 0)


def test_risk_premia_solve_linear_system(market):
    """theta = -2/9 and gamma = -1/27 for the reference coefficients."""
    premia = market_price_of_risk(market)
    assert premia.gamma == pytest.approx([-1.0 / 27.0])
    assert premia.theta == pytest.approx([-0.2 - 0.6 / 27.0])
    assert premia.z == pytest.approx([-math.log(26.0 / 27.0)])
    solved = market.big_sigma @ np.concatenate([premia.theta, premia.gamma])
    assert solved == pytest.approx(-np.asarray(MU))


def test_zero_drift_gives_zero_premia():
    """mu = 0 means P is already a martingale measure."""
    premia = market_price_of_risk(build_market([0.0, 0.0], SIGMA, PHI, _lattice()))
    assert premia.theta == pytest.approx([0.0])
    assert premia.gamma == pytest.approx([0.0])


def test_martingale_residual_is_second_order():
    """Halving dt divides the one-step drift error by about four."""
    residuals = []
    for horizon in (0.1, 0.05):
        lattice = _lattice(horizon, 1)
        market = build_market(MU, SIGMA, PHI, lattice)
        pricing = tilt_to_measure(market_price_of_risk(market).tilt(), lattice)
        residuals.append(martingale_residual(market, pricing))
    assert residuals[0] < 1e-2
    assert 3.0 < residuals[0] / residuals[1] < 5.0


def test_invalid_markets():
    """Singular Sigma, jumps below -1, wrong shapes and negative prices are refused."""
    lattice = _lattice()
    with pytest.raises(SingularSigma):
        build_market(MU, [[0.2], [0.4]], [[0.1], [0.2]], lattice)
    with pytest.raises(BadJumpSize):
        build_market(MU, SIGMA, [[-1.5], [0.1]], lattice)
    with pytest.raises(DimensionMismatch):
        build_market([0.05], SIGMA, PHI, lattice)
    with pytest.raises(NonpositivePrice):
        build_market(MU, [[3.0], [0.1]], PHI, lattice)
    with pytest.raises(NonpositivePrice):
        build_market(MU, SIGMA, PHI, lattice, initial_prices=[1.0, 0.0])


def test_wealth_without_investment(market):
    """pi = 0: wealth only falls by consumption, x - sum c dt."""
    lattice = market.lattice
    consumption = constant_process(0.4, lattice)
    wealth = wealth_path(1.0, [np.zeros(2)] * 2, consumption, market)
    assert wealth.leaves == pytest.approx(np.full(lattice.leaf_count, 1.0 - 0.4))
    assert check_admissible(wealth).admissible


def test_first_admissibility_violation(market):
    """Consuming too fast drives wealth negative at the first step."""
    consumption = constant_process(10.0, market.lattice)
    wealth = wealth_path(1.0, [np.zeros(2)] * 2, consumption, market)
    report = check_admissible(wealth)
    assert not report.admissible
    assert report.first_violation == (1, 0)


def test_holdings_shape_checked(market):
    """Holdings need one slice per step."""
    with pytest.raises(DimensionMismatch):
        wealth_path(1.0, [np.zeros(2)], constant_process(0.0, market.lattice), market)


def test_budget_identity(market):
    """Under the pricing measure the budget gap is bounded by the drift error."""
    lattice = market.lattice
    pricing = tilt_to_measure(market_price_of_risk(market).tilt(), lattice)
    consumption = constant_process(0.3, lattice)
    idle = budget_identity_gap(1.0, [np.zeros(2)] * 2, consumption, market, pricing)
    assert abs(idle) <= 1e-12
    invested = budget_identity_gap(1.0, [np.ones(2)] * 2, consumption, market, pricing)
    largest_price = max(float(np.max(s)) for s in market.prices)
    bound = lattice.steps * 2 * largest_price * martingale_residual(market, pricing)
    assert abs(invested) <= bound + 1e-12
