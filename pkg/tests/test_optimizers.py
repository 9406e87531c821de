from __future__ import annotations

import math

import numpy as np
import pytest

from meanfield_repr.models import AdaptedProcess, TimeGrid
from meanfield_repr.services.fixtures import random_instance
from meanfield_repr.services.generators import Affine
from meanfield_repr.services.optimizers import (
    CallableMarginalUtility,
    ConsumptionSpec,
    PowerMarginalUtility,
    SingularControlSpec,
    best_grid_control_cost,
    consumption_budget,
    consumption_from_lhat,
    consumption_utility,
    enumerate_monotone_controls,
    estimate_budget_truncation,
    hitting_index,
    hitting_times,
    increments_of,
    satisfaction_from_increments,
    satisfaction_level,
    singular_cost,
    singular_optimizer,
)
from meanfield_repr.services.prob_tree import chain_tree, enumerate_stopping_times
from meanfield_repr.services.representation import (
    LhatResult,
    result_from_ell,
    solve_essinf_bruteforce,
    stopping_objective,
)


def test_hitting_times_smallest_and_biggest(chain3):
    result = result_from_ell(chain3, [1.5, 2.25, 1.5, 0.0], "fixed")
    tau, tau_prime = hitting_times(result, 2.0)
    assert tau.stop_nodes() == (1,)
    assert tau_prime.stop_nodes() == (1,)
    tau, tau_prime = hitting_times(result, 1.5)
    assert tau.stop_nodes() == (0,)
    assert tau_prime.stop_nodes() == (1,)


def test_hitting_index_on_one_path():
    lhat = np.array([-np.inf, 1.5, 2.25, 2.25])
    assert hitting_index(lhat, 2.0) == 1
    assert hitting_index(lhat, 1.5) == 0
    assert hitting_index(lhat, 1.5, strict=True) == 1
    assert hitting_index(lhat, 5.0) == 3


def _singular_spec(tree, k_per_time, cap=1.0):
    return SingularControlSpec(
        floor=0.0,
        cap=AdaptedProcess.constant(tree, cap),
        cost_derivative=Affine.identity(tree),
        control_cost=AdaptedProcess.from_times(tree, k_per_time),
    )


def test_singular_spec_validation(chain3):
    with pytest.raises(ValueError):
        _singular_spec(chain3, [0.0, 0.0, 0.0, 0.0], cap=-1.0)
    with pytest.raises(ValueError):
        _singular_spec(chain3, [0.0, 0.0, 0.0, 1.0])


def test_one_step_singular_control_is_first_order_condition():
    tree = chain_tree(TimeGrid(1.0, 1))
    spec = _singular_spec(tree, [-0.5, 0.0])
    Y, f = spec.representation_inputs()
    control = singular_optimizer(solve_essinf_bruteforce(tree, Y, f), spec)
    assert control.values.tolist() == pytest.approx([0.0, 0.5])
    assert singular_cost(tree, spec, control) == pytest.approx(-0.125)
    assert best_grid_control_cost(tree, spec, points=5) == pytest.approx(-0.125)


def test_singular_control_beats_grid_controls(chain3):
    spec = _singular_spec(chain3, [-0.6, -0.3, -0.1, 0.0])
    Y, f = spec.representation_inputs()
    control = singular_optimizer(solve_essinf_bruteforce(chain3, Y, f), spec)
    assert control.values.tolist() == pytest.approx([0.0, 0.6, 0.6, 0.6])
    cost = singular_cost(chain3, spec, control)
    assert cost == pytest.approx(-0.18)
    assert cost <= best_grid_control_cost(chain3, spec, points=11) + 1e-9


def test_singular_optimizer_clamps_to_bounds(chain3):
    spec = _singular_spec(chain3, [0.0, 0.0, 0.0, 0.0])
    lhat = AdaptedProcess(chain3, [-np.inf, -1.0, 0.5, 3.0])
    assert singular_optimizer(lhat, spec).values.tolist() == pytest.approx([0.0, 0.0, 0.5, 1.0])


def test_singular_cost_by_hand(chain3):
    spec = _singular_spec(chain3, [0.3, 0.3, 0.3, 0.0])
    control = AdaptedProcess(chain3, [0.0, 0.5, 1.0, 1.0])
    assert singular_cost(chain3, spec, control) == pytest.approx(0.675)
    with pytest.raises(ValueError):
        singular_cost(chain3, spec, AdaptedProcess(chain3, [0.0, 1.0, 0.5, 0.5]))


def test_grid_controls_are_monotone(binary2):
    spec = _singular_spec(binary2, [0.0, 0.0, 0.0])
    controls = list(enumerate_monotone_controls(binary2, spec, points=3))
    assert controls
    for control in controls:
        theta = control.values
        inner = binary2.parent >= 0
        assert np.all(theta[inner] >= theta[binary2.parent[inner]])


@pytest.fixture
def consumption_setup():
    tree = chain_tree(TimeGrid(3.0, 3))
    spec = ConsumptionSpec(
        rate=AdaptedProcess.constant(tree, 1.0),
        beta=1.0,
        eta=0.01,
        lam=100.0,
        marginal_utility=PowerMarginalUtility(gamma=1.0),
    )
    return tree, spec


def test_consumption_inputs(consumption_setup):
    tree, spec = consumption_setup
    assert spec.deflator().tolist() == pytest.approx([1.0, math.exp(-1), math.exp(-2), math.exp(-3)])
    Y, f = spec.representation_inputs()
    assert Y.values.tolist() == pytest.approx([-100.0, -100 * math.exp(-2), -100 * math.exp(-4), 0.0])
    assert f.value(1, -2.0) == pytest.approx(-2.0)


def test_consumption_plan_from_lhat(consumption_setup):
    tree, spec = consumption_setup
    Y, f = spec.representation_inputs()
    result = solve_essinf_bruteforce(tree, Y, f)
    assert result.ell.values[0] == pytest.approx(-100.0 * (1.0 - math.exp(-2)))
    satisfaction, plan, budget = consumption_from_lhat(result, spec)
    assert satisfaction.values[0] == pytest.approx(1.0 / (100.0 * (1.0 - math.exp(-2))))
    floor = spec.eta * spec.discount()
    assert np.all(satisfaction.values >= floor - 1e-12)
    inc = increments_of(tree, plan)
    assert np.all(inc >= 0.0)
    assert satisfaction_from_increments(tree, spec, inc) == pytest.approx(satisfaction.values)
    assert budget == pytest.approx(consumption_budget(tree, spec, plan))
    assert budget > 0.0


def test_consumption_rejects_nonnegative_lhat(consumption_setup):
    tree, spec = consumption_setup
    result = result_from_ell(tree, [0.5, 0.5, 0.5, 0.0], "fixed")
    with pytest.raises(ValueError):
        consumption_from_lhat(result, spec)


def test_consumption_spec_validation(consumption_setup):
    tree, _ = consumption_setup
    with pytest.raises(ValueError):
        ConsumptionSpec(AdaptedProcess.constant(tree, 0.0), 0.0, 1.0, 1.0, PowerMarginalUtility())


def test_power_utility_integrals():
    assert PowerMarginalUtility(gamma=1.0).integral(0, 1.0, math.e) == pytest.approx(1.0)
    assert PowerMarginalUtility(gamma=2.0).integral(0, 1.0, 2.0) == pytest.approx(0.5)


def test_budget_truncation_estimate(consumption_setup):
    _, spec = consumption_setup
    assert estimate_budget_truncation(spec) == pytest.approx(100.0)


def test_consumption_utility(consumption_setup):
    tree, spec = consumption_setup
    assert consumption_utility(tree, spec, AdaptedProcess.constant(tree, 0.0)) == pytest.approx(0.0, abs=1e-12)
    lump = AdaptedProcess.constant(tree, 0.09)
    assert consumption_utility(tree, spec, lump) == pytest.approx(3.0 * math.log(10.0))
    quadrature = ConsumptionSpec(spec.rate, spec.beta, spec.eta, spec.lam, CallableMarginalUtility(lambda node, y: 1.0 / y))
    assert consumption_utility(tree, quadrature, lump) == pytest.approx(3.0 * math.log(10.0), rel=1e-8)


def test_satisfaction_level_band():
    levels = np.array([-200.0, -50.0, -10.0, 0.5])
    assert satisfaction_level(levels, 0.01, 0.05).tolist() == pytest.approx([0.01, 0.02, 0.05, 0.05])
    assert satisfaction_level(levels[:2], 0.01).tolist() == pytest.approx([0.01, 0.02])
    with pytest.raises(ValueError):
        satisfaction_level(levels, 0.01)


def test_consumption_cap_accepts_nonnegative_lhat(consumption_setup):
    tree, spec = consumption_setup
    capped = ConsumptionSpec(spec.rate, spec.beta, spec.eta, spec.lam, spec.marginal_utility, eta_bar=0.05)
    result = result_from_ell(tree, [-50.0, 0.5, 0.5, 0.0], "fixed")
    satisfaction, plan, budget = consumption_from_lhat(result, capped)
    expected = np.array([0.02, 0.05, 0.05, 0.05]) * capped.discount()
    assert satisfaction.values.tolist() == pytest.approx(expected.tolist())
    assert np.all(increments_of(tree, plan) >= 0.0)
    assert budget > 0.0
    with pytest.raises(ValueError):
        ConsumptionSpec(spec.rate, spec.beta, spec.eta, spec.lam, spec.marginal_utility, eta_bar=0.01)


def test_consumption_rejects_decreasing_lhat(consumption_setup):
    tree, spec = consumption_setup
    falling = LhatResult(AdaptedProcess(tree, [-np.inf, -1.0, -2.0, -3.0]))
    with pytest.raises(ValueError, match="单调"):
        consumption_from_lhat(falling, spec)


def test_consumption_plan_beats_plans_with_the_same_budget(consumption_setup):
    tree, spec = consumption_setup
    Y, f = spec.representation_inputs()
    _, plan, budget = consumption_from_lhat(solve_essinf_bruteforce(tree, Y, f), spec)
    best = consumption_utility(tree, spec, plan)
    rng = np.random.default_rng(5)
    for _ in range(20):
        other = AdaptedProcess(tree, np.cumsum(rng.exponential(1.0, size=tree.size)))
        other = other.scale(budget / consumption_budget(tree, spec, other))
        assert consumption_budget(tree, spec, other) == pytest.approx(budget)
        assert consumption_utility(tree, spec, other) <= best + 1e-9
    for bump in (0.9, 1.1):
        assert consumption_utility(tree, spec, plan.scale(bump)) - spec.lam * budget * bump <= best - spec.lam * budget + 1e-9


@pytest.mark.parametrize("seed", range(10))
def test_singular_optimizer_beats_grid_on_random_two_period_specs(binary2, seed):
    rng = np.random.default_rng(seed)
    k = rng.uniform(-1.0, 0.5, size=binary2.size)
    k[binary2.is_terminal] = 0.0
    spec = SingularControlSpec(
        floor=0.0,
        cap=AdaptedProcess.constant(binary2, 5.0),
        cost_derivative=Affine.identity(binary2),
        control_cost=AdaptedProcess(binary2, k),
    )
    Y, f = spec.representation_inputs()
    control = singular_optimizer(solve_essinf_bruteforce(binary2, Y, f), spec)
    assert singular_cost(binary2, spec, control) <= best_grid_control_cost(binary2, spec, points=11) + 1e-9


@pytest.mark.parametrize("seed", range(8))
def test_hitting_times_solve_the_stopping_problem(seed):
    rng = np.random.default_rng(seed)
    tree, Y, f = random_instance(rng, steps=3, max_branch=2)
    result = solve_essinf_bruteforce(tree, Y, f)
    candidates = enumerate_stopping_times(tree)
    inner = ~tree.is_terminal
    levels = list(rng.normal(0.0, 1.5, size=3)) + [float(result.ell.values[inner][0])]
    for level in levels:
        running = f.values_at(float(level))
        tau, tau_prime = hitting_times(result, level)
        values = np.array([stopping_objective(tree, Y.values, running, sigma) for sigma in candidates])
        top = values.max()
        assert stopping_objective(tree, Y.values, running, tau) == pytest.approx(top, abs=1e-9)
        assert stopping_objective(tree, Y.values, running, tau_prime) == pytest.approx(top, abs=1e-9)
        assert np.all(tau.path_indices() <= tau_prime.path_indices())
        for sigma, value in zip(candidates, values):
            if value >= top - 1e-9:
                assert np.all(tau.path_indices() <= sigma.path_indices())
                assert np.all(sigma.path_indices() <= tau_prime.path_indices())
