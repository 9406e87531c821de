from __future__ import annotations

import numpy as np
import pytest

from meanfield_repr.models import AdaptedProcess, TimeGrid
from meanfield_repr.services.generators import Affine
from meanfield_repr.services.stability import (
    DECAY_RATIO,
    PerturbationFamily,
    Perturbation,
    additive_family,
    counterexample_family,
    counterexample_formula,
    counterexample_i,
    counterexample_ii,
    counterexample_samples,
    hitting_time_convergence,
    stability_sweep,
    zero_family,
)


@pytest.mark.parametrize("n", [2, 4, 8])
def test_counterexample_i_matches_closed_form(n):
    record = counterexample_i(n)
    assert record.grid_steps == 64 * n
    assert record.formula_error < 1e-9
    assert record.plateau_error < 1e-9
    assert record.tail_error < 1e-9
    assert record.ell_half == pytest.approx(-1.0)
    assert record.lhat_half == pytest.approx(-2.0 / (n + 2))
    assert record.levy == pytest.approx(2.0 / (n + 2), abs=1e-8)
    assert record.e_n == pytest.approx(1.0 / n)


@pytest.mark.parametrize("n", [2, 4, 8])
def test_counterexample_ii_does_not_converge(n):
    record = counterexample_ii(n)
    assert record.formula_error < 1e-9
    assert record.ell_half == pytest.approx(-float(n))
    assert record.lhat_half == pytest.approx(-2.0 * n / (n + 2))
    assert record.levy == pytest.approx(0.5 + 1.0 / n, abs=1e-8)
    assert record.e_n == pytest.approx(1.0)
    assert "levy" in record.to_dict()


def test_counterexample_formula_endpoints():
    values = counterexample_formula("i", 4, np.array([0.0, 0.5]))
    assert values.tolist() == pytest.approx([-2.0 / 6.0, -1.0])


def test_counterexample_samples_validation():
    with pytest.raises(ValueError):
        counterexample_samples("i", 1, TimeGrid(1.0, 64))
    with pytest.raises(ValueError):
        counterexample_samples("i", 4, TimeGrid(1.0, 12))
    with pytest.raises(ValueError):
        counterexample_samples("iii", 4, TimeGrid(1.0, 64))


def test_counterexample_samples_jump_at_end():
    y, left = counterexample_samples("ii", 4, TimeGrid(1.0, 16))
    assert y[8] == 0.0
    assert y[9] == pytest.approx(4.0 * (9 / 16 - 0.5))
    assert y[12] == 0.0
    assert left[12] == pytest.approx(1.0)


def test_sweep_over_counterexample_i():
    sweep = stability_sweep(counterexample_family("i"))
    assert [row.n for row in sweep.rows] == [2, 4, 8, 16]
    assert [row.mean_levy for row in sweep.rows] == pytest.approx([0.5, 1 / 3, 0.2, 1 / 9], abs=1e-8)
    assert sweep.spearman == pytest.approx(1.0)
    assert sweep.converges
    assert sweep.rows[0].p_exceed == 1.0


def test_sweep_flags_counterexample_ii():
    sweep = stability_sweep(counterexample_family("ii"))
    assert not sweep.converges
    assert sweep.notes
    assert all(row.e_n == pytest.approx(1.0) for row in sweep.rows)


def test_additive_scaling_family_converges(binary2, rng):
    values = rng.normal(size=binary2.size)
    values[binary2.is_terminal] = 0.0
    Y = AdaptedProcess(binary2, values)
    family = additive_family(binary2, Y, Affine.identity(binary2), Y, base_scale=0.1)
    sweep = stability_sweep(family)
    e = [row.e_n for row in sweep.rows]
    d = [row.mean_levy for row in sweep.rows]
    assert all(a > b for a, b in zip(e, e[1:]))
    assert all(a > b for a, b in zip(d, d[1:]))
    assert sweep.spearman == pytest.approx(1.0)
    assert sweep.converges


def test_zero_family_converges_trivially(binary2, rng):
    values = rng.normal(size=binary2.size)
    values[binary2.is_terminal] = 0.0
    family = zero_family(binary2, AdaptedProcess(binary2, values), Affine.identity(binary2))
    sweep = stability_sweep(family)
    assert all(row.e_n == 0.0 and row.d_lp == 0.0 for row in sweep.rows)
    assert sweep.converges


def test_sweep_requires_positive_epsilon(binary2):
    family = zero_family(binary2, AdaptedProcess.constant(binary2, 0.0), Affine.identity(binary2))
    with pytest.raises(ValueError):
        stability_sweep(family, epsilon=0.0)


def test_family_rejects_unknown_solver(binary2):
    base = Perturbation(0, AdaptedProcess.constant(binary2, 0.0), Affine.identity(binary2))
    with pytest.raises(ValueError):
        PerturbationFamily(binary2, base, solver="magic")


def test_hitting_times_converge_for_counterexample_i():
    report = hitting_time_convergence(counterexample_family("i"), level=-0.25)
    assert not report.skipped
    assert report.probabilities == {2: 1.0, 4: 1.0, 8: 0.0, 16: 0.0}


def test_hitting_check_skips_exceptional_level():
    report = hitting_time_convergence(counterexample_family("i"), level=0.0)
    assert report.skipped
    assert report.probabilities == {}
    assert report.to_dict()["skipped"]


def test_sweep_records_seed_and_decay_rule():
    sweep = stability_sweep(counterexample_family("ii"), seed=17)
    assert not sweep.tends_to_zero
    body = sweep.to_dict()
    assert body["seed"] == 17
    assert body["tends_to_zero"]["value"] is False
    assert str(DECAY_RATIO) in body["tends_to_zero"]["rule"]
    assert stability_sweep(counterexample_family("i")).to_dict()["seed"] is None
