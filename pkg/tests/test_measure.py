"""Tests for measures on the tree, entropy and the criterion Gamma."""

import csv
import math

import numpy as np
import pytest

from robustbsde.errors import InvalidMeasure, NonpositiveBeta, TiltTooLarge
from robustbsde.lattice import (
    TimeGrid,
    build_lattice,
    constant_intensity,
    constant_process,
    discount_process,
    zero_discount,
)
from robustbsde.measure import (
    CriterionSpec,
    EntropyForm,
    GirsanovTilt,
    NodeMeasure,
    backward_expectation,
    beta_reduce,
    criterion_gamma,
    discounted_entropy,
    export_measure,
    implied_intensity,
    relative_entropy,
    stepwise_kl,
    tilt_to_measure,
)


@pytest.fixture
def one_step():
    return build_lattice(TimeGrid(1.0, 1), 1, 0)


@pytest.fixture
def jump_lattice():
    return build_lattice(TimeGrid(1.0, 2), 1, 1, constant_intensity(0.4))


def test_stepwise_kl_two_point(one_step):
    """q = (0.75, 0.25) against p = (0.5, 0.5)."""
    measure = NodeMeasure(one_step, (np.array([[0.75, 0.25]]),))
    expected = 0.75 * math.log(1.5) + 0.25 * math.log(0.5)
    assert stepwise_kl(measure)[0][0] == pytest.approx(expected)
    assert expected == pytest.approx(0.13081, abs=1e-5)
    assert relative_entropy(measure) == pytest.approx(expected)


def test_base_measure_has_unit_density(jump_lattice):
    """Z^P is identically one and a martingale."""
    base = NodeMeasure.base(jump_lattice)
    for z in base.densities:
        assert z == pytest.approx(np.ones_like(z))
    assert base.martingale_residual() == pytest.approx(0.0, abs=1e-15)
    assert relative_entropy(base) == pytest.approx(0.0, abs=1e-15)


def test_measure_validation(one_step):
    """Rows must be probability vectors of the right shape."""
    with pytest.raises(InvalidMeasure, match="sum to 1"):
        NodeMeasure(one_step, (np.array([[0.7, 0.2]]),))
    with pytest.raises(InvalidMeasure, match="negative"):
        NodeMeasure(one_step, (np.array([[1.5, -0.5]]),))
    with pytest.raises(InvalidMeasure, match="slices"):
        NodeMeasure(one_step, ())


def test_tilt_measure_is_a_martingale_density(jump_lattice):
    """Girsanov tilt gives an equivalent measure with martingale density."""
    measure = tilt_to_measure(GirsanovTilt([0.3], [0.2]), jump_lattice)
    assert measure.is_equivalent()
    assert measure.martingale_residual() < 1e-12
    assert relative_entropy(measure) > 0


def test_tilt_shifts_brownian_drift(one_step):
    """Drift loading theta gives E^Q[dW] = theta dt exactly for p = 1."""
    measure = tilt_to_measure(GirsanovTilt([0.4], []), one_step)
    drift = measure.probabilities[0] @ one_step.brownian_increments
    assert drift[0, 0] == pytest.approx(0.4 * one_step.step)


def test_implied_intensity_first_order(jump_lattice):
    """Jump tilt z scales the intensity by about e^{-z}."""
    z = 0.3
    measure = tilt_to_measure(GirsanovTilt([0.0], [z]), jump_lattice)
    implied = implied_intensity(measure)[0][0, 0]
    assert implied == pytest.approx(0.4 * math.exp(-z), rel=0.2)
    assert implied != pytest.approx(0.4 * math.exp(-z), rel=1e-6)


def test_tilt_too_large(one_step):
    """|theta| sqrt(dt) >= 1 would make a child weight negative."""
    with pytest.raises(TiltTooLarge):
        tilt_to_measure(GirsanovTilt([1.5], []), one_step)


def test_gamma_at_base_measure_is_expected_payoff(jump_lattice):
    """Gamma(P) has zero penalty and equals the discounted expected payoff."""
    discount = zero_discount(jump_lattice)
    terminal = jump_lattice.jump_counts[-1][:, 0]
    spec = CriterionSpec(constant_process(1.0, jump_lattice), terminal, discount)
    base = NodeMeasure.base(jump_lattice)
    expected = 1.0 + float(np.dot(base.path_probabilities[-1], terminal))
    assert criterion_gamma(spec, base) == pytest.approx(expected)


def test_entropy_forms_agree_without_discount(jump_lattice):
    """With delta = 0 both penalty discretizations equal H(Q|P)."""
    measure = tilt_to_measure(GirsanovTilt([0.2], [-0.1]), jump_lattice)
    discount = zero_discount(jump_lattice)
    entropy = relative_entropy(measure)
    assert discounted_entropy(measure, discount) == pytest.approx(entropy)
    riemann = discounted_entropy(measure, discount, form=EntropyForm.RIEMANN)
    assert riemann == pytest.approx(entropy)


def test_entropy_forms_gap_halves_with_the_step():
    """delta = 1 and a fixed tilt: the two penalties differ by O(dt)."""
    gaps = []
    for steps in (2, 4, 8):
        lattice = build_lattice(TimeGrid(1.0, steps), 1, 0)
        measure = tilt_to_measure(GirsanovTilt([0.5], []), lattice)
        discount = discount_process(constant_process(1.0, lattice), lattice)
        stepwise = discounted_entropy(measure, discount, form=EntropyForm.STEPWISE_KL)
        riemann = discounted_entropy(measure, discount, form=EntropyForm.RIEMANN)
        gaps.append(stepwise - riemann)
    assert gaps[0] > gaps[1] > gaps[2] > 0
    for coarse, fine in zip(gaps, gaps[1:]):
        assert 1.6 <= coarse / fine <= 2.4


def test_beta_reduce_scales_inputs(jump_lattice):
    """beta_reduce divides inputs by beta; beta must be positive."""
    discount = discount_process(constant_process(0.1, jump_lattice), jump_lattice)
    spec = CriterionSpec(
        constant_process(2.0, jump_lattice), np.full(16, 4.0), discount, beta=2.0
    )
    reduced = beta_reduce(spec)
    assert reduced.beta == 1.0
    assert reduced.cost[0] == pytest.approx([1.0])
    assert reduced.terminal == pytest.approx(np.full(16, 2.0))
    with pytest.raises(NonpositiveBeta):
        CriterionSpec(spec.cost, spec.terminal, discount, beta=0.0)


def test_backward_expectation_matches_forward_sum(jump_lattice):
    """Root value equals the path-weighted terminal mean."""
    measure = tilt_to_measure(GirsanovTilt([0.2], [0.1]), jump_lattice)
    terminal = jump_lattice.brownian[-1][:, 0] ** 2
    values = backward_expectation(jump_lattice, measure.probabilities, terminal)
    assert values[0][0] == pytest.approx(measure.expect(2, terminal))


def test_export_measure_adds_q_column(jump_lattice, tmp_path):
    """Node file gains a q_prob column matching the measure."""
    measure = tilt_to_measure(GirsanovTilt([0.2], [0.1]), jump_lattice)
    path = tmp_path / "nodes.csv"
    export_measure(measure, path)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert float(rows[1]["q_prob"]) == pytest.approx(measure.probabilities[0][0, 0])
