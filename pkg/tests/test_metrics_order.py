from __future__ import annotations

import numpy as np
import pytest

from meanfield_repr.models import AtomLaw, RandomMeasure, VPlusPath
from meanfield_repr.services.metrics_order import (
    conditional_law,
    dirac_measure,
    levy_distance,
    levy_distance_truncated,
    levy_prokhorov,
    measures_equal,
    mix_measures,
    prune_support,
    random_measure_distance,
    random_measure_leq,
    sample_ordered_pair,
    stochastic_order_leq,
    support_distance,
)


def flat(value: float) -> VPlusPath:
    return VPlusPath((0.0, 1.0), (value,))


def test_levy_distance_of_level_gap():
    assert levy_distance(flat(0.0), flat(0.0)) == 0.0
    assert levy_distance(flat(0.0), flat(0.3)) == pytest.approx(0.3, abs=1e-9)
    assert levy_distance(flat(0.3), flat(0.0)) == pytest.approx(0.3, abs=1e-9)


def test_levy_distance_is_capped_by_horizon():
    assert levy_distance(flat(0.0), flat(5.0)) == pytest.approx(1.0, abs=1e-9)


def test_levy_distance_of_time_shift():
    early = VPlusPath((0.0, 0.5, 1.0), (0.0, 1.0))
    late = VPlusPath((0.0, 0.5, 1.0), (0.0, 0.0))
    assert 0.0 < levy_distance(early, late) <= 0.5 + 1e-9


def test_levy_distance_rejects_mismatched_horizons():
    with pytest.raises(ValueError):
        levy_distance(flat(0.0), VPlusPath((0.0, 2.0), (0.0,)))


def test_truncated_levy_distance():
    total, tail = levy_distance_truncated(flat(1.0), flat(1.0), 4)
    assert total == 0.0
    assert tail == pytest.approx(1.0 / 16.0)
    with pytest.raises(ValueError):
        levy_distance_truncated(flat(1.0), flat(1.0), 0)


def test_levy_prokhorov_single_points():
    assert levy_prokhorov([1.0], [1.0], np.array([[0.2]])) == pytest.approx(0.2)
    assert levy_prokhorov([1.0], [1.0], np.array([[3.0]])) == 1.0


def test_levy_prokhorov_two_points():
    dist = np.array([[0.0, 0.9], [0.9, 0.05]])
    assert levy_prokhorov([0.5, 0.5], [0.5, 0.5], dist) == pytest.approx(0.05)


def test_levy_prokhorov_validates_shapes():
    with pytest.raises(ValueError):
        levy_prokhorov([1.0], [0.5, 0.5], np.zeros((1, 1)))


def test_stochastic_order_on_the_line():
    mu = [(0.5, (0.0,)), (0.5, (1.0,))]
    nu = [(1.0, (1.0,))]
    assert stochastic_order_leq(mu, nu)
    assert not stochastic_order_leq(nu, mu)


def test_stochastic_order_is_componentwise():
    a = [(1.0, (0.0, 1.0))]
    b = [(1.0, (1.0, 0.0))]
    assert not stochastic_order_leq(a, b)
    assert not stochastic_order_leq(b, a)
    with pytest.raises(ValueError):
        stochastic_order_leq(a, [(1.0, (0.0,))])


def test_sampled_pairs_are_ordered(binary2, rng):
    base = conditional_law(binary2, lambda path: (float(path.leaf),))
    low, high = sample_ordered_pair(base, rng)
    assert random_measure_leq(low, high)
    assert random_measure_distance(low, low) == 0.0


def test_conditional_law_weights(binary2):
    law = conditional_law(binary2, lambda path: (float(path.leaf),))
    assert law.atom_count == 1
    assert [w for w, _ in law.atoms[0].support] == pytest.approx([0.25] * 4)


def test_mix_and_equality(binary2):
    zero = dirac_measure(binary2, (0.0,))
    one = dirac_measure(binary2, (1.0,))
    mixed = mix_measures(zero, one, 0.5)
    assert [w for w, _ in mixed.atoms[0].support] == pytest.approx([0.5, 0.5])
    assert mix_measures(zero, one, 0.0) is zero
    assert measures_equal(zero, dirac_measure(binary2, (0.0,)))
    assert not measures_equal(zero, one)


def test_prune_merges_near_duplicates():
    pruned = prune_support([(0.5, (0.0,)), (0.5, (1e-12,))])
    assert len(pruned) == 1
    assert pruned[0][0] == pytest.approx(1.0)


def test_measure_distance_reduces_over_atoms():
    near = RandomMeasure("vector", (AtomLaw(0.5, ((1.0, (0.0,)),)), AtomLaw(0.5, ((1.0, (0.0,)),))))
    far = RandomMeasure("vector", (AtomLaw(0.5, ((1.0, (0.2,)),)), AtomLaw(0.5, ((1.0, (0.0,)),))))
    assert random_measure_distance(near, far) == pytest.approx(0.2)
    assert random_measure_distance(near, far, reduce="mean") == pytest.approx(0.1)


def random_path(rng, steps):
    inner = np.sort(rng.uniform(0.05, 0.95, size=steps - 1))
    times = (0.0,) + tuple(inner) + (1.0,)
    return VPlusPath(times, tuple(np.cumsum(rng.uniform(0.0, 0.5, size=steps))))


@pytest.mark.parametrize("seed", range(10))
def test_levy_distance_is_a_metric_on_random_paths(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (random_path(rng, int(rng.integers(1, 5))) for _ in range(3))
    ab, bc, ac = levy_distance(a, b), levy_distance(b, c), levy_distance(a, c)
    assert ab == pytest.approx(levy_distance(b, a), abs=1e-12)
    assert ac <= ab + bc + 1e-9
    assert 0.0 <= ab <= 1.0
    assert levy_distance(a, a) == 0.0


def random_support(rng, size=3, dim=2):
    weights = rng.dirichlet(np.ones(size))
    return [(float(w), tuple(rng.uniform(0.0, 0.6, size=dim))) for w in weights]


@pytest.mark.parametrize("seed", range(10))
def test_levy_prokhorov_triangle_inequality(seed):
    rng = np.random.default_rng(seed)
    mu, nu, rho = (random_support(rng) for _ in range(3))
    assert support_distance(mu, rho) <= support_distance(mu, nu) + support_distance(nu, rho) + 1e-9
    assert support_distance(mu, nu) == pytest.approx(support_distance(nu, mu), abs=1e-12)


def dominates(mu, nu):
    """F_mu ≥ F_nu everywhere on the line."""
    points = sorted({o[0] for _, o in mu} | {o[0] for _, o in nu})
    for x in points:
        f_mu = sum(w for w, o in mu if o[0] <= x)
        f_nu = sum(w for w, o in nu if o[0] <= x)
        if f_mu < f_nu - 1e-12:
            return False
    return True


def test_stochastic_order_matches_cdf_dominance_on_the_line():
    rng = np.random.default_rng(3)
    agreed = {True: 0, False: 0}
    for trial in range(60):
        weights = rng.dirichlet(np.ones(3))
        points = rng.integers(0, 5, size=3)
        mu = [(float(w), (float(p),)) for w, p in zip(weights, points)]
        if trial % 2:
            shifted = points + rng.integers(0, 3, size=3)
            nu = [(float(w), (float(p),)) for w, p in zip(weights, shifted)]
        else:
            nu = [(float(w), (float(p),)) for w, p in zip(rng.dirichlet(np.ones(3)), rng.integers(0, 5, size=3))]
        expected = dominates(mu, nu)
        assert stochastic_order_leq(mu, nu) == expected
        agreed[expected] += 1
    assert agreed[True] and agreed[False]
