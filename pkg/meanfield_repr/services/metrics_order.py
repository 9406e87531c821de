"""Metrics and orders on step paths and finite-support measures.

The stochastic order ≤_p on finite supports is decided through
Strassen's coupling criterion: μ ≤_p ν iff some coupling is supported on
{x ≤ y componentwise}. Path outcomes are compared through their values
on the shared grid, so the criterion is exact for grid paths.
"""
from __future__ import annotations

import logging
import math
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
from networkx.algorithms.flow import edmonds_karp

from ..errors import TreeError
from ..models import AtomLaw, CompositeOutcome, Outcome, PathRecord, RandomMeasure, ScenarioTree, VPlusPath

logger = logging.getLogger(__name__)

BISECTION_TOL = 1e-10
FLOW_TOL = 1e-12
MERGE_TOL = 1e-9
PRUNE_WEIGHT = 1e-12

Support = Sequence[Tuple[float, Outcome]]


def _feasible_shift(v1: VPlusPath, v2: VPlusPath, eps: float, horizon: float) -> bool:
    marks = [0.0, horizon]
    for path in (v1, v2):
        marks.extend(path.times)
        marks.extend(t + eps for t in path.times)
    marks = np.unique([m for m in marks if 0.0 <= m <= horizon])
    probes = 0.5 * (marks[:-1] + marks[1:])
    if probes.size == 0:
        return True
    shifted = np.maximum(probes - eps, 0.0)
    a1, a2 = v1.evaluate(probes), v2.evaluate(probes)
    s1, s2 = v1.evaluate(shifted), v2.evaluate(shifted)
    return bool(np.all(s1 - eps <= a2) and np.all(s2 - eps <= a1))


def levy_distance(v1: VPlusPath, v2: VPlusPath, horizon: Optional[float] = None) -> float:
    """Lévy distance on (0, horizon) by bisection over the shift ε.

    Between consecutive breakpoints both constraints are constant, so
    feasibility is checked at one probe per interval. The returned value
    is a feasible upper endpoint within 1e-10 of the infimum.
    """
    if horizon is None:
        if abs(v1.horizon - v2.horizon) > 1e-12:
            raise ValueError(f"路径时间跨度不一致：{v1.horizon} 与 {v2.horizon}")
        horizon = v1.horizon
    if _feasible_shift(v1, v2, 0.0, horizon):
        return 0.0
    lo, hi = 0.0, float(horizon)
    while hi - lo > BISECTION_TOL:
        mid = 0.5 * (lo + hi)
        if _feasible_shift(v1, v2, mid, horizon):
            hi = mid
        else:
            lo = mid
    return hi


def levy_distance_truncated(v1: VPlusPath, v2: VPlusPath, horizon_terms: int) -> Tuple[float, float]:
    """Σ_{n≤M} 2^{-n}(d_L on [0, n) ∧ 1) and the tail bound 2^{-M}."""
    if horizon_terms < 1:
        raise ValueError("截断项数必须至少为 1")
    total = 0.0
    for n in range(1, horizon_terms + 1):
        total += 2.0 ** (-n) * min(levy_distance(v1, v2, float(n)), 1.0)
    return total, 2.0 ** (-horizon_terms)


def _max_flow(weights_a: np.ndarray, weights_b: np.ndarray, edges: np.ndarray) -> float:
    graph = nx.DiGraph()
    for i, w in enumerate(weights_a):
        graph.add_edge("s", ("a", i), capacity=float(w))
    for j, w in enumerate(weights_b):
        graph.add_edge(("b", j), "t", capacity=float(w))
    for i, j in zip(*np.nonzero(edges)):
        graph.add_edge(("a", int(i)), ("b", int(j)), capacity=2.0)
    if not graph.has_node("s") or not graph.has_node("t"):
        return 0.0
    return float(nx.maximum_flow_value(graph, "s", "t", flow_func=edmonds_karp))


def levy_prokhorov(weights_a: Sequence[float], weights_b: Sequence[float], distances: np.ndarray) -> float:
    """Smallest ε admitting a coupling with mass ≥ 1 − ε on pairs within distance ε.

    With F(d) the largest mass coupled on pairs at distance ≤ d, ε is
    feasible iff F(ε) ≥ 1 − ε. F is a step function of the sorted
    distinct distances, so the first feasible step is located by binary
    search and the infimum is read off exactly.
    """
    a = np.asarray(weights_a, dtype=float)
    b = np.asarray(weights_b, dtype=float)
    dist = np.asarray(distances, dtype=float)
    if a.size == 0 or b.size == 0:
        raise ValueError("测度的支撑集为空")
    if dist.shape != (a.size, b.size):
        raise ValueError("距离矩阵形状与支撑集不一致")
    levels = np.unique(dist[np.isfinite(dist)])
    if levels.size == 0:
        return 1.0
    cache: Dict[int, float] = {}

    def coupled(k: int) -> float:
        if k not in cache:
            cache[k] = _max_flow(a, b, dist <= levels[k])
        return cache[k]

    def step_feasible(k: int) -> bool:
        nxt = levels[k + 1] if k + 1 < levels.size else math.inf
        return 1.0 - coupled(k) - FLOW_TOL < nxt

    lo, hi = 0, levels.size - 1
    if not step_feasible(hi):
        return 1.0
    while lo < hi:
        mid = (lo + hi) // 2
        if step_feasible(mid):
            hi = mid
        else:
            lo = mid + 1
    value = max(levels[lo], 1.0 - coupled(lo))
    return float(min(max(value, 0.0), 1.0))


def outcome_vector(outcome: Outcome) -> np.ndarray:
    """Finite-dimensional projection used for ordering and quantization."""
    if isinstance(outcome, VPlusPath):
        return np.asarray(outcome.values, dtype=float)
    if isinstance(outcome, CompositeOutcome):
        return np.concatenate((outcome.path.values, outcome.vector)).astype(float)
    return np.asarray(outcome, dtype=float)


def outcome_key(outcome: Outcome) -> Tuple[float, ...]:
    return tuple(float(v) for v in outcome_vector(outcome))


def outcome_distance(x: Outcome, y: Outcome) -> float:
    """Lévy distance for paths, sup-norm for vectors, the max of both for composites."""
    if isinstance(x, VPlusPath):
        return levy_distance(x, y)
    if isinstance(x, CompositeOutcome):
        vec = np.max(np.abs(np.subtract(x.vector, y.vector))) if x.vector else 0.0
        return max(levy_distance(x.path, y.path), float(vec))
    diff = np.abs(np.subtract(x, y))
    return float(np.max(diff)) if diff.size else 0.0


def support_distance(mu: Support, nu: Support) -> float:
    dist = np.array([[outcome_distance(x, y) for _, y in nu] for _, x in mu])
    return levy_prokhorov([w for w, _ in mu], [w for w, _ in nu], dist)


def random_measure_distance(m1: RandomMeasure, m2: RandomMeasure, reduce: str = "max") -> float:
    """Per-atom Lévy–Prokhorov distances, reduced by max or by atom-mass average."""
    if m1.atom_count != m2.atom_count:
        raise ValueError("随机测度的原子数量不一致")
    values = [support_distance(a.support, b.support) for a, b in zip(m1.atoms, m2.atoms)]
    if reduce == "mean":
        return float(sum(a.mass * v for a, v in zip(m1.atoms, values)))
    return float(max(values))


def stochastic_order_leq(mu: Support, nu: Support) -> bool:
    """μ ≤ ν in the componentwise stochastic order (monotone coupling exists)."""
    if not mu or not nu:
        raise ValueError("测度的支撑集为空")
    xs = np.array([outcome_vector(o) for _, o in mu])
    ys = np.array([outcome_vector(o) for _, o in nu])
    if xs.shape[1] != ys.shape[1]:
        raise ValueError(f"维度不一致：{xs.shape[1]} 与 {ys.shape[1]}")
    edges = np.all(xs[:, None, :] <= ys[None, :, :] + FLOW_TOL, axis=2)
    flow = _max_flow(np.array([w for w, _ in mu]), np.array([w for w, _ in nu]), edges)
    return flow >= 1.0 - FLOW_TOL


def random_measure_leq(m1: RandomMeasure, m2: RandomMeasure) -> bool:
    """m1 ≤_p m2: the order holds on every atom."""
    return all(stochastic_order_leq(a.support, b.support) for a, b in zip(m1.atoms, m2.atoms))


def canonical_support(pairs: Support) -> Tuple[Tuple[float, Outcome], ...]:
    """Merge identical outcomes and sort by outcome key."""
    merged: Dict[Tuple[float, ...], List] = {}
    for weight, outcome in pairs:
        key = outcome_key(outcome)
        if key in merged:
            merged[key][0] += weight
        else:
            merged[key] = [weight, outcome]
    return tuple((w, o) for _, (w, o) in sorted(merged.items(), key=lambda item: item[0]))


def conditional_law(
    tree: ScenarioTree,
    functional: Callable[[PathRecord], Outcome],
    kind: str = "vector",
) -> RandomMeasure:
    """Per-atom law of ``functional`` over the tree's paths."""
    atoms = []
    for atom in range(tree.atom_count):
        mass = float(tree.atom_mass[atom])
        if mass <= 0:
            raise TreeError(f"公共噪声原子 {atom} 的概率为零")
        pairs = [(p.probability / mass, functional(p)) for p in tree.paths if p.atom == atom]
        support = canonical_support(pairs)
        total = sum(w for w, _ in support)
        atoms.append(AtomLaw(mass, tuple((w / total, o) for w, o in support)))
    return RandomMeasure(kind, tuple(atoms))


def prune_support(pairs: Support) -> Tuple[Tuple[float, Outcome], ...]:
    """Merge outcomes closer than 1e-9, drop negligible weights, renormalize."""
    kept: List[List] = []
    for weight, outcome in canonical_support(pairs):
        vec = outcome_vector(outcome)
        for slot in kept:
            if _close(slot[2], vec, slot[1], outcome):
                slot[0] += weight
                break
        else:
            kept.append([weight, outcome, vec])
    kept = [slot for slot in kept if slot[0] >= PRUNE_WEIGHT]
    total = sum(slot[0] for slot in kept)
    return tuple((w / total, o) for w, o, _ in kept)


def _close(vec_a: np.ndarray, vec_b: np.ndarray, a: Outcome, b: Outcome) -> bool:
    # on a shared grid the sup distance bounds the Lévy distance
    if vec_a.shape == vec_b.shape and (not isinstance(a, VPlusPath) or a.times == b.times):
        return bool(np.max(np.abs(vec_a - vec_b), initial=0.0) < MERGE_TOL)
    return outcome_distance(a, b) < MERGE_TOL


def mix_measures(m1: RandomMeasure, m2: RandomMeasure, weight: float) -> RandomMeasure:
    """(1 − weight)·m1 + weight·m2 atom by atom."""
    if weight >= 1.0:
        return m2
    if weight <= 0.0:
        return m1
    atoms = []
    for a, b in zip(m1.atoms, m2.atoms):
        pairs = [((1.0 - weight) * w, o) for w, o in a.support] + [(weight * w, o) for w, o in b.support]
        atoms.append(AtomLaw(a.mass, prune_support(pairs)))
    return RandomMeasure(m1.kind, tuple(atoms))


def measures_equal(m1: RandomMeasure, m2: RandomMeasure) -> bool:
    """Exact equality of supports and weights."""
    if m1.kind != m2.kind or m1.atom_count != m2.atom_count:
        return False
    for a, b in zip(m1.atoms, m2.atoms):
        sa, sb = canonical_support(a.support), canonical_support(b.support)
        if len(sa) != len(sb):
            return False
        for (wa, oa), (wb, ob) in zip(sa, sb):
            if wa != wb or outcome_key(oa) != outcome_key(ob):
                return False
    return True


def shift_outcome(outcome: Outcome, amount: float) -> Outcome:
    if isinstance(outcome, VPlusPath):
        return VPlusPath(outcome.times, tuple(v + amount for v in outcome.values))
    if isinstance(outcome, CompositeOutcome):
        return CompositeOutcome(shift_outcome(outcome.path, amount), tuple(v + amount for v in outcome.vector))
    return tuple(v + amount for v in outcome)


def sample_ordered_pair(
    measure: RandomMeasure,
    rng: np.random.Generator,
    scale: float = 1.0,
) -> Tuple[RandomMeasure, RandomMeasure]:
    """(m, m') with m ≤_p m': every support point is shifted up by a random nonnegative amount."""
    upper = []
    for atom in measure.atoms:
        shifted = tuple((w, shift_outcome(o, float(rng.uniform(0.0, scale)))) for w, o in atom.support)
        upper.append(AtomLaw(atom.mass, shifted))
    return measure, RandomMeasure(measure.kind, tuple(upper))


def dirac_measure(tree: ScenarioTree, outcome: Outcome, kind: str = "vector") -> RandomMeasure:
    """The same point mass on every atom."""
    return RandomMeasure(kind, tuple(AtomLaw(float(m), ((1.0, outcome),)) for m in tree.atom_mass))
