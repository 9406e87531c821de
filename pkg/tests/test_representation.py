from __future__ import annotations

import math

import numpy as np
import pytest

from meanfield_repr.errors import EnumerationRefused, RepresentationError
from meanfield_repr.models import AdaptedProcess, StoppingTime, TimeGrid
from meanfield_repr.services.fixtures import random_instance
from meanfield_repr.services.generators import Affine
from meanfield_repr.services.prob_tree import uniform_tree
from meanfield_repr.services.representation import (
    deterministic_lhat,
    ell_root,
    lhat_after,
    representation_tolerance,
    snell_smallest_optimal,
    solve_deterministic_convex_envelope,
    solve_essinf_bruteforce,
    solve_level_grid,
    solve_representation,
    stopping_objective,
    verify_representation,
)

# Y = (2, 1.5, 0.5, 0) on three steps of length 1/3 has L = (1.5, 2.25, 1.5)
CHAIN_Y = [2.0, 1.5, 0.5, 0.0]
CHAIN_L = [1.5, 2.25, 1.5]


def test_oracle_on_chain(chain3):
    Y = AdaptedProcess.from_times(chain3, CHAIN_Y)
    result = solve_essinf_bruteforce(chain3, Y, Affine.identity(chain3))
    assert result.ell.values[:3].tolist() == pytest.approx(CHAIN_L)
    assert result.lhat.values[0] == -math.inf
    assert result.lhat.values[1:].tolist() == pytest.approx([1.5, 2.25, 2.25])
    assert result.diagnostics["residual"] < 1e-9


def test_convex_envelope_matches_oracle():
    ell = solve_deterministic_convex_envelope(CHAIN_Y, horizon=1.0)
    assert ell.tolist() == pytest.approx(CHAIN_L)
    lhat = deterministic_lhat(ell)
    assert lhat[0] == -math.inf
    assert lhat[1:].tolist() == pytest.approx([1.5, 2.25, 2.25])


def test_level_grid_on_chain(chain3):
    Y = AdaptedProcess.from_times(chain3, CHAIN_Y)
    f = Affine.identity(chain3)
    result = solve_level_grid(chain3, Y, f)
    assert result.level_grid[0] == pytest.approx(1.5)
    assert result.level_grid[-1] == pytest.approx(3.0)
    assert result.ell_values()[:3].tolist() == pytest.approx(CHAIN_L, abs=result.grid_cell)
    assert result.diagnostics["grid_covers"]
    assert result.diagnostics["residual"] <= representation_tolerance(result, f)


def test_level_grid_agrees_with_oracle_on_random_tree(binary2, rng):
    values = rng.normal(size=binary2.size)
    values[binary2.is_terminal] = 0.0
    Y = AdaptedProcess(binary2, values)
    f = Affine.identity(binary2)
    oracle = solve_essinf_bruteforce(binary2, Y, f)
    grid = solve_level_grid(binary2, Y, f)
    inner = ~binary2.is_terminal
    assert oracle.diagnostics["residual"] < 1e-9
    assert np.allclose(grid.ell_values()[inner], oracle.ell.values[inner], atol=grid.grid_cell + 1e-9)


def test_oracle_ignores_martingale_part(binary2, rng):
    values = rng.normal(size=binary2.size)
    Y = AdaptedProcess(binary2, values)
    f = Affine(AdaptedProcess.constant(binary2, 0.5), 2.0)
    result = solve_representation(binary2, Y, f, oracle=True)
    assert verify_representation(binary2, Y, f, result) < 1e-9


def test_oracle_refuses_large_trees():
    tree = uniform_tree(TimeGrid(1.0, 7), 2)
    Y = AdaptedProcess.constant(tree, 0.0)
    with pytest.raises(EnumerationRefused):
        solve_essinf_bruteforce(tree, Y, Affine.identity(tree))


def test_ell_root_for_a_fixed_stopping_time(chain3):
    Y = AdaptedProcess.from_times(chain3, CHAIN_Y)
    f = Affine.identity(chain3)
    sigma = StoppingTime.from_stop_nodes(chain3, [2])
    assert ell_root(chain3, Y, f, 0, sigma) == pytest.approx(2.25)
    with pytest.raises(RepresentationError):
        ell_root(chain3, Y, f, 0, StoppingTime.at_time(chain3, 0))


def test_snell_prefers_stopping_on_ties(binary2):
    payoff = AdaptedProcess(binary2, [0.5, 1.0, 0.0, 2.0, 0.0, 0.0, 0.0])
    envelope, tau = snell_smallest_optimal(binary2, payoff, AdaptedProcess.constant(binary2, 0.0))
    assert tau.stop_nodes() == (0,)
    assert envelope.values[0] == pytest.approx(0.5)


def test_snell_with_running_reward(binary2):
    payoff = AdaptedProcess(binary2, [0.5, 1.0, 0.0, 2.0, 0.0, 0.0, 0.0])
    running = AdaptedProcess.constant(binary2, 1.0)
    envelope, tau = snell_smallest_optimal(binary2, payoff, running)
    assert tau.stop_nodes() == (3, 4, 5, 6)
    assert envelope.values[0] == pytest.approx(1.5)
    assert stopping_objective(binary2, payoff.values, running.values, tau) == pytest.approx(1.5)


def test_snell_rejects_non_finite_payoff(binary2):
    payoff = AdaptedProcess(binary2, [math.inf] + [0.0] * 6)
    with pytest.raises(RepresentationError):
        snell_smallest_optimal(binary2, payoff, AdaptedProcess.constant(binary2, 0.0))


def test_level_grid_validates_levels(chain3):
    Y = AdaptedProcess.from_times(chain3, CHAIN_Y)
    with pytest.raises(RepresentationError):
        solve_level_grid(chain3, Y, Affine.identity(chain3), levels=[1.0, 1.0])
    with pytest.raises(RepresentationError):
        solve_level_grid(chain3, Y, Affine.identity(chain3), levels=[1.0])


def test_lhat_after_reads_the_child_level(chain3):
    lhat = np.array([-np.inf, 1.5, 2.25, 2.25])
    assert lhat_after(chain3, lhat).tolist() == pytest.approx([1.5, 2.25, 2.25, 2.25])


def test_result_paths_are_left_continuous(chain3):
    Y = AdaptedProcess.from_times(chain3, CHAIN_Y)
    result = solve_essinf_bruteforce(chain3, Y, Affine.identity(chain3))
    path = result.path(chain3.paths[0])
    assert path(0.0) == -math.inf
    assert path(0.2) == pytest.approx(1.5)
    assert path(0.5) == pytest.approx(2.25)
    assert "lhat" in result.to_dict()


SOLVER_CASES = [("affine", seed) for seed in range(50)] + [("table", seed) for seed in range(10)]


@pytest.mark.parametrize("generator, seed", SOLVER_CASES)
def test_random_instances_agree_across_solvers(generator, seed):
    rng = np.random.default_rng(seed)
    tree, Y, f = random_instance(rng, steps=3, max_branch=2, generator=generator)
    oracle = solve_essinf_bruteforce(tree, Y, f)
    grid = solve_level_grid(tree, Y, f)
    inner = ~tree.is_terminal
    assert oracle.diagnostics["residual"] < 1e-8
    assert np.allclose(grid.ell_values()[inner], oracle.ell.values[inner], atol=grid.grid_cell + 1e-8)
    assert grid.diagnostics["residual"] <= representation_tolerance(grid, f)


def _oracle_instance(seed):
    rng = np.random.default_rng(seed)
    tree, Y, _ = random_instance(rng, steps=3, max_branch=2)
    return tree, Y


@pytest.mark.parametrize("seed", range(5))
def test_scaling_y_scales_l(seed):
    tree, Y = _oracle_instance(seed)
    f = Affine.identity(tree)
    inner = ~tree.is_terminal
    base = solve_essinf_bruteforce(tree, Y, f).ell.values[inner]
    scaled = solve_essinf_bruteforce(tree, Y.scale(2.5), f).ell.values[inner]
    assert scaled == pytest.approx(2.5 * base, abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_supermartingale_gap_and_smaller_generator_raise_lhat(seed):
    tree, Y2 = _oracle_instance(seed)
    # deterministic decreasing drift, zero at the horizon
    drift = AdaptedProcess.from_times(tree, 0.7 * (tree.grid.steps - np.arange(tree.grid.steps + 1)))
    Y1 = Y2 + drift
    f1 = Affine.identity(tree)
    f2 = Affine(AdaptedProcess.constant(tree, 0.3), 1.0)
    high = solve_essinf_bruteforce(tree, Y1, f1).lhat.values
    low = solve_essinf_bruteforce(tree, Y2, f2).lhat.values
    finite = np.isfinite(low)
    assert np.all(high[finite] >= low[finite] - 1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_level_grid_error_shrinks_with_the_cell(seed):
    tree, Y = _oracle_instance(seed)
    f = Affine.identity(tree)
    inner = ~tree.is_terminal
    exact = solve_essinf_bruteforce(tree, Y, f).ell.values[inner]
    coarse = solve_level_grid(tree, Y, f, count=17)
    fine = solve_level_grid(tree, Y, f, count=1025)
    coarse_err = np.max(np.abs(coarse.ell_values()[inner] - exact))
    fine_err = np.max(np.abs(fine.ell_values()[inner] - exact))
    assert coarse_err <= coarse.grid_cell + 1e-9
    assert fine_err <= fine.grid_cell + 1e-9
    assert fine.grid_cell < coarse.grid_cell / 50.0


@pytest.mark.parametrize("seed", range(5))
def test_stop_regions_shrink_as_the_level_rises(seed):
    tree, Y = _oracle_instance(seed)
    result = solve_level_grid(tree, Y, Affine.identity(tree), count=33)
    levels = sorted(result.stop_times)
    for lower, upper in zip(levels, levels[1:]):
        assert np.all(result.stop_times[lower].path_indices() <= result.stop_times[upper].path_indices())
