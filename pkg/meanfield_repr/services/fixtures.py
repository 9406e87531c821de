"""Built-in instances: random trees with data, and an order-preserving adapter."""
from __future__ import annotations

import math
from typing import Optional, Tuple

import numpy as np

from ..models import AdaptedProcess, RandomMeasure, ScenarioTree
from .generators import Affine, GeneratorSpec, TableMonotone
from .meanfield import AdapterOutput, Adapter
from .metrics_order import outcome_vector
from .prob_tree import random_tree


def random_payoff(rng: np.random.Generator, tree: ScenarioTree, scale: float = 1.0) -> AdaptedProcess:
    """Gaussian values before the horizon, zero at terminal nodes."""
    values = rng.normal(0.0, scale, size=tree.size)
    values[tree.is_terminal] = 0.0
    return AdaptedProcess(tree, values)


def random_affine(rng: np.random.Generator, tree: ScenarioTree) -> Affine:
    return Affine(AdaptedProcess(tree, rng.normal(0.0, 1.0, size=tree.size)), float(rng.uniform(0.5, 2.0)))


def random_table(rng: np.random.Generator, tree: ScenarioTree, knots: int = 5) -> TableMonotone:
    grid = np.linspace(-3.0, 3.0, knots)
    steps = rng.uniform(0.2, 2.0, size=(tree.size, knots - 1)) * np.diff(grid)
    rows = np.column_stack([np.zeros(tree.size), steps]).cumsum(axis=1)
    rows += rng.normal(0.0, 1.0, size=(tree.size, 1)) - rows[:, [knots // 2]]
    return TableMonotone(tree, grid, rows, slope=float(rng.uniform(0.5, 1.5)))


def random_instance(
    rng: np.random.Generator,
    steps: int = 3,
    max_branch: int = 2,
    generator: str = "affine",
    atom_count: int = 1,
) -> Tuple[ScenarioTree, AdaptedProcess, GeneratorSpec]:
    tree = random_tree(rng, steps, max_branch=max_branch, atom_count=atom_count)
    f = random_table(rng, tree) if generator == "table" else random_affine(rng, tree)
    return tree, random_payoff(rng, tree), f


def mean_statistic(measure: RandomMeasure) -> float:
    """⟨φ, m⟩ with φ the coordinate average of tanh, averaged over atoms by mass."""
    total = 0.0
    for atom in measure.atoms:
        total += atom.mass * sum(w * float(np.mean(np.tanh(outcome_vector(o)))) for w, o in atom.support)
    return total


def ordered_adapter(
    tree: ScenarioTree,
    base_y: AdaptedProcess,
    base_a: AdaptedProcess,
    slope: float = 1.0,
    drift_weight: float = 0.1,
    generator_weight: float = 0.1,
    state: Optional[AdaptedProcess] = None,
    reverse: bool = False,
) -> Adapter:
    """Adapter with a drift and a generator shift that both decrease in ⟨φ, m⟩.

    Y^m_t = Y_t + h·⟨φ, m⟩·(T − t) and f^m(ℓ) = a − k·⟨φ, m⟩ + b·ℓ. For
    m¹ ≤_p m² this gives f^{m¹} ≥ f^{m²} and Y^{m²} − Y^{m¹} nonincreasing,
    so the image map preserves the order. ``reverse`` flips the sign of the
    generator shift.
    """
    if drift_weight < 0 or generator_weight < 0:
        raise ValueError("交互强度必须非负")
    remaining = tree.grid.horizon - tree.grid.times()[tree.times]
    x = state if state is not None else AdaptedProcess.constant(tree, 0.0)
    sign = 1.0 if reverse else -1.0

    def adapter(measure: RandomMeasure) -> AdapterOutput:
        mean = mean_statistic(measure)
        y = AdaptedProcess(tree, base_y.values + drift_weight * mean * remaining)
        a = AdaptedProcess(tree, base_a.values + sign * generator_weight * mean)
        return AdapterOutput(x, y, Affine(a, slope))

    return adapter


def scalar_feedback_adapter(tree: ScenarioTree, base_y: AdaptedProcess, strength: float) -> Adapter:
    """f^m(ℓ) = ℓ + strength·⟨φ, m⟩; a large strength makes Φ overshoot."""

    def adapter(measure: RandomMeasure) -> AdapterOutput:
        shift = strength * mean_statistic(measure)
        return AdapterOutput(
            AdaptedProcess.constant(tree, 0.0),
            base_y,
            Affine(AdaptedProcess.constant(tree, shift), 1.0),
        )

    return adapter


def tanh_interaction(scale: float = 0.25):
    """φ(x) = scale·(1 + tanh x), with φ′ ≤ scale, and its derivative."""
    return (
        lambda x: scale * (1.0 + math.tanh(x)),
        lambda x: scale / math.cosh(x) ** 2,
    )
