"""Representation process L̂ for (Y, f) on a scenario tree.

Three solvers are provided: a level-grid Snell method, an exhaustive
ess-inf oracle for small trees and the convex-envelope method for
deterministic data with f(t, ℓ) = ℓ. On a tree the identity that L
satisfies is

    Y_τ = E[ Σ_{τ ≤ t < N} f(t, max_{τ ≤ s ≤ t} L_s) dt | F_τ ],

for Y with zero terminal value. L̂_t = max_{s < t} L_s with L̂_0 = -inf.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import RepresentationError
from ..models import AdaptedProcess, PathRecord, ScenarioTree, StoppingTime, VPlusPath, encode_real
from .generators import Affine, GeneratorSpec, solve_increasing
from .prob_tree import (
    DEFAULT_MAX_PATHS,
    _stop_set_table,
    guard_paths,
    later_stop_sets,
    normalize_terminal,
    one_step_expectation,
)

logger = logging.getLogger(__name__)

SNELL_TOL = 1e-12
ORACLE_TOL = 1e-9
DEFAULT_LEVELS = 257


@dataclass(eq=False)
class LhatResult:
    """Running maximum L̂ with the data it was derived from."""

    lhat: AdaptedProcess
    level_grid: Optional[np.ndarray] = None
    stop_times: Dict[float, StoppingTime] = field(default_factory=dict)
    diagnostics: Dict[str, object] = field(default_factory=dict)
    ell: Optional[AdaptedProcess] = None
    regions: Optional[np.ndarray] = None

    @property
    def tree(self) -> ScenarioTree:
        return self.lhat.tree

    @property
    def method(self) -> str:
        return str(self.diagnostics.get("method", "unknown"))

    @property
    def grid_cell(self) -> float:
        if self.level_grid is None:
            return 0.0
        return float(np.max(np.diff(self.level_grid)))

    def path(self, path: PathRecord) -> VPlusPath:
        return VPlusPath.from_lhat(self.tree.grid.times(), self.lhat.path_values(path))

    def ell_values(self) -> np.ndarray:
        """L itself when stored, otherwise the per-node level recovered from the stop regions."""
        if self.ell is not None:
            return self.ell.values
        if self.regions is not None and self.level_grid is not None:
            return grid_levels(self.level_grid, self.regions)
        raise RepresentationError("结果中既无 L 也无停止区域，无法重建表示")

    def to_dict(self) -> Dict:
        payload = {
            "levels": None if self.level_grid is None else self.level_grid.tolist(),
            "lhat": self.lhat.to_dict(),
            "residual": self.diagnostics.get("residual"),
            "stop_times": {repr(float(level)): st.to_dict() for level, st in self.stop_times.items()},
            "diagnostics": {k: (encode_real(v) if isinstance(v, float) else v) for k, v in self.diagnostics.items()},
        }
        if self.ell is not None:
            payload["ell"] = self.ell.to_dict()
        return payload


def running_max(tree: ScenarioTree, ell: np.ndarray) -> np.ndarray:
    """L̂ at every node: max of L over strict ancestors, -inf at the root."""
    out = np.full(tree.size, -np.inf)
    for layer in tree.layers[1:]:
        parents = tree.parent[layer]
        out[layer] = np.maximum(out[parents], ell[parents])
    return out


def lhat_after(tree: ScenarioTree, lhat: np.ndarray) -> np.ndarray:
    """Level in force from each node on, max_{s ≤ t} L_s (equal to L̂ at its children)."""
    out = np.array(lhat, dtype=float, copy=True)
    for node in range(tree.size):
        if tree.children[node]:
            out[node] = lhat[tree.children[node][0]]
    return out


def grid_levels(levels: np.ndarray, regions: np.ndarray) -> np.ndarray:
    """Largest grid level whose Snell stop region contains the node."""
    counts = regions.sum(axis=1)
    return levels[np.clip(counts - 1, 0, None)]


def snell_smallest_optimal(
    tree: ScenarioTree,
    payoff: AdaptedProcess,
    running: AdaptedProcess,
) -> Tuple[AdaptedProcess, StoppingTime]:
    """Snell envelope of payoff_τ + Σ_{s<τ} running_s dt and its smallest optimal stopping time."""
    payoff.require_tree(tree)
    running.require_tree(tree)
    if not np.all(np.isfinite(payoff.values)) or not np.all(np.isfinite(running.values)):
        raise RepresentationError("收益过程包含非有限值")
    envelope, regions = _snell(tree, payoff.values, running.values[:, None])
    return AdaptedProcess(tree, envelope[:, 0]), StoppingTime(tree, regions[:, 0])


def _snell(tree: ScenarioTree, payoff: np.ndarray, running: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Backward induction for several running rewards at once (columns of ``running``)."""
    width = running.shape[1]
    envelope = np.repeat(payoff[:, None], width, axis=1).astype(float)
    regions = np.zeros((tree.size, width), dtype=bool)
    regions[tree.is_terminal] = True
    dt = tree.dt
    for layer in reversed(tree.layers[:-1]):
        cont = running[layer] * dt + tree.transition[layer] @ envelope
        immediate = payoff[layer][:, None]
        envelope[layer] = np.maximum(immediate, cont)
        regions[layer] = immediate >= cont - SNELL_TOL
    return envelope, regions


def stopping_objective(
    tree: ScenarioTree,
    payoff: np.ndarray,
    running: np.ndarray,
    tau: StoppingTime,
) -> float:
    """E[payoff_τ + Σ_{s<τ} running_s dt]."""
    total = 0.0
    for path in tree.paths:
        acc = 0.0
        for node in path.nodes:
            if tau.region[node]:
                acc += payoff[node]
                break
            acc += running[node] * tree.dt
        total += path.probability * acc
    return total


def _split_subtree(
    tree: ScenarioTree,
    node: int,
    is_stop,
) -> Tuple[List[int], List[float], List[int], List[float]]:
    """Nodes visited strictly before σ (with conditional weights) and the stop nodes of σ."""
    active, active_w, stops, stop_w = [], [], [], []
    stack = [(node, 1.0)]
    while stack:
        current, weight = stack.pop()
        active.append(current)
        active_w.append(weight)
        for child in tree.children[current]:
            w = weight * tree.branch_prob[child]
            if is_stop(child):
                stops.append(child)
                stop_w.append(w)
            else:
                stack.append((child, w))
    return active, active_w, stops, stop_w


def _solve_ell(
    tree: ScenarioTree,
    Y: np.ndarray,
    f: GeneratorSpec,
    node: int,
    parts: Tuple[List[int], List[float], List[int], List[float]],
) -> float:
    active, active_w, stops, stop_w = parts
    dt = tree.dt
    rhs = Y[node] - float(np.dot(stop_w, Y[stops]))
    weights = np.asarray(active_w)
    if isinstance(f, Affine):
        a = f.a.values[active]
        return (rhs / dt - float(np.dot(weights, a))) / (f.b * weights.sum())
    b_min = max(f.slope_bounds()[0], 1e-12)
    scale = float(np.max(np.abs(Y))) / (dt * b_min)

    def residual(ell: float) -> float:
        return float(np.dot(weights, f.values_at(ell, active))) * dt - rhs

    return solve_increasing(residual, scale=scale)


def ell_root(
    tree: ScenarioTree,
    Y: AdaptedProcess,
    f: GeneratorSpec,
    node: int,
    sigma: StoppingTime,
) -> float:
    """The level ℓ solving E[Σ_{t≤s<σ} f(s, ℓ) dt | F_t] = E[Y_t − Y_σ | F_t] at ``node``."""
    node = tree.check_node(node)
    Y.require_tree(tree)
    if not sigma.tree.same_structure(tree):
        raise RepresentationError("停时与场景树不匹配")
    if tree.is_terminal[node] or sigma.region[node]:
        raise RepresentationError(f"停时 σ 必须在节点 {node} 之后严格停止")
    parts = _split_subtree(tree, node, lambda child: bool(sigma.region[child]))
    return _solve_ell(tree, Y.values, f, node, parts)


def solve_essinf_bruteforce(
    tree: ScenarioTree,
    Y: AdaptedProcess,
    f: GeneratorSpec,
    max_paths: int = DEFAULT_MAX_PATHS,
) -> LhatResult:
    """L_t = min over all stopping times σ > t of ℓ_{t,σ}, by enumeration."""
    Y.require_tree(tree)
    guard_paths(tree, max_paths)
    table = _stop_set_table(tree)
    ell = np.full(tree.size, np.inf)
    for node in range(tree.size):
        if tree.is_terminal[node]:
            continue
        best = np.inf
        for stops in later_stop_sets(tree, node, table):
            stop_set = set(stops)
            parts = _split_subtree(tree, node, stop_set.__contains__)
            best = min(best, _solve_ell(tree, Y.values, f, node, parts))
        ell[node] = best
    result = LhatResult(
        lhat=AdaptedProcess(tree, running_max(tree, ell)),
        ell=AdaptedProcess(tree, ell),
        diagnostics={"method": "oracle"},
    )
    result.diagnostics["residual"] = verify_representation(tree, Y, f, result)
    logger.debug("oracle residual %.3e", result.diagnostics["residual"])
    return result


def default_levels(
    tree: ScenarioTree,
    Y: AdaptedProcess,
    f: GeneratorSpec,
    count: int = DEFAULT_LEVELS,
) -> np.ndarray:
    """Uniform grid over [min, max] of the one-step roots, which brackets L."""
    nxt = one_step_expectation(tree, Y.values)
    roots = [
        f.invert(node, (Y.values[node] - nxt[node]) / tree.dt)
        for node in range(tree.size)
        if not tree.is_terminal[node]
    ]
    lo, hi = float(min(roots)), float(max(roots))
    if hi - lo < 1e-12:
        lo, hi = lo - 1.0, hi + 1.0
    return np.linspace(lo, hi, count)


def solve_level_grid(
    tree: ScenarioTree,
    Y: AdaptedProcess,
    f: GeneratorSpec,
    levels: Optional[Sequence[float]] = None,
    count: int = DEFAULT_LEVELS,
    verify: bool = True,
) -> LhatResult:
    """L̂_t = sup{ℓ in the grid : τ_ℓ ≤ t−1} with τ_ℓ the smallest optimal stopping time at level ℓ."""
    Y.require_tree(tree)
    levels = default_levels(tree, Y, f, count) if levels is None else np.asarray(levels, dtype=float)
    if levels.ndim != 1 or levels.size < 2:
        raise RepresentationError("水平网格至少需要两个点")
    if np.any(np.diff(levels) <= 0):
        raise RepresentationError("水平网格必须严格递增")
    running = np.column_stack([f.values_at(float(level)) for level in levels])
    _, regions = _snell(tree, Y.values, running)
    if np.any(regions[:, 1:] & ~regions[:, :-1]):
        node, k = np.argwhere(regions[:, 1:] & ~regions[:, :-1])[0]
        raise RepresentationError(f"τ_ℓ 关于 ℓ 不单调：节点 {node}，水平 {levels[k + 1]:.6g}")
    ell = grid_levels(levels, regions)
    inner = ~tree.is_terminal
    covers = bool(np.all(regions[inner, 0]))
    if not covers:
        logger.warning("level grid starts above L at some node (lowest level %g)", levels[0])
    result = LhatResult(
        lhat=AdaptedProcess(tree, running_max(tree, ell)),
        level_grid=levels,
        stop_times={float(level): StoppingTime(tree, regions[:, k]) for k, level in enumerate(levels)},
        diagnostics={"method": "level_grid", "grid_cell": float(np.max(np.diff(levels))), "grid_covers": covers},
        regions=regions,
    )
    if verify:
        result.diagnostics["residual"] = verify_representation(tree, Y, f, result)
    return result


def solve_representation(
    tree: ScenarioTree,
    Y: AdaptedProcess,
    f: GeneratorSpec,
    oracle: bool = False,
    levels: Optional[Sequence[float]] = None,
    count: int = DEFAULT_LEVELS,
) -> LhatResult:
    """Oracle when requested, level-grid method otherwise."""
    if oracle:
        return solve_essinf_bruteforce(tree, Y, f)
    return solve_level_grid(tree, Y, f, levels=levels, count=count)


def lower_convex_envelope(
    y_samples: Sequence[float],
    dt: Optional[float] = None,
    horizon: float = 1.0,
    left_limits: Optional[Sequence[float]] = None,
) -> np.ndarray:
    """Initial slope at each grid time of the lower convex hull of (s, −Y_s), s > t.

    ``left_limits`` supplies Y(s−); a stopping time approaching s from the
    left then competes with the value max(Y_s, Y_{s−}).
    """
    y = np.asarray(y_samples, dtype=float)
    if y.ndim != 1 or y.size < 2:
        raise RepresentationError("确定性样本至少需要两个时间点")
    steps = y.size - 1
    dt = horizon / steps if dt is None else float(dt)
    cand = y if left_limits is None else np.maximum(y, np.asarray(left_limits, dtype=float))
    slopes = np.empty(steps)
    hull_x: List[float] = []
    hull_y: List[float] = []
    for k in range(steps - 1, -1, -1):
        px, py = float(k + 1), -float(cand[k + 1])
        while len(hull_x) >= 2:
            bx, by, cx, cy = hull_x[-1], hull_y[-1], hull_x[-2], hull_y[-2]
            if (bx - px) * (cy - by) - (by - py) * (cx - bx) <= 0:
                hull_x.pop()
                hull_y.pop()
            else:
                break
        hull_x.append(px)
        hull_y.append(py)
        hx, hy = np.asarray(hull_x), np.asarray(hull_y)
        slopes[k] = float(np.min((hy + y[k]) / (hx - k))) / dt
    return slopes


def solve_deterministic_convex_envelope(
    y_samples: Sequence[float],
    dt: Optional[float] = None,
    horizon: float = 1.0,
    left_limits: Optional[Sequence[float]] = None,
) -> np.ndarray:
    """Per-time L for deterministic Y and f(t, ℓ) = ℓ (length N)."""
    return lower_convex_envelope(y_samples, dt=dt, horizon=horizon, left_limits=left_limits)


def deterministic_lhat(ell: Sequence[float]) -> np.ndarray:
    """Running max of a per-time L sequence, with the -inf sentinel first (length N+1)."""
    ell = np.asarray(ell, dtype=float)
    return np.concatenate(([-np.inf], np.maximum.accumulate(ell)))


def result_from_ell(tree: ScenarioTree, ell: np.ndarray, method: str) -> LhatResult:
    """Wrap a per-node L (terminal entries ignored) into an LhatResult."""
    ell = np.array(ell, dtype=float, copy=True)
    ell[tree.is_terminal] = np.inf
    return LhatResult(
        lhat=AdaptedProcess(tree, running_max(tree, ell)),
        ell=AdaptedProcess(tree, ell),
        diagnostics={"method": method},
    )


def representation_tolerance(result: LhatResult, f: GeneratorSpec) -> float:
    if result.level_grid is None:
        return ORACLE_TOL
    slope = f.slope_bounds()[1]
    return result.grid_cell * result.tree.grid.horizon * slope + ORACLE_TOL


def verify_representation(
    tree: ScenarioTree,
    Y: AdaptedProcess,
    f: GeneratorSpec,
    lhat: LhatResult,
    starts: Optional[Iterable[StoppingTime]] = None,
) -> float:
    """Max |Ŷ_ν − E[Σ_{t≥ν} f(t, max_{ν≤s≤t} L_s) dt | ν]| over the stop nodes of ``starts``.

    Y is reduced to zero terminal value first. Without ``starts`` every
    node is checked, which covers all stopping times.
    """
    Y.require_tree(tree)
    if not lhat.tree.same_structure(tree):
        raise RepresentationError("表示结果与场景树不匹配")
    y_hat, _ = normalize_terminal(tree, Y)
    ell = lhat.ell_values()
    if starts is None:
        nodes = range(tree.size)
    else:
        nodes = sorted({node for st in starts for node in st.stop_nodes()})
    worst = 0.0
    for node in nodes:
        if tree.is_terminal[node]:
            worst = max(worst, abs(y_hat.values[node]))
            continue
        sub = tree.subtree(node)
        level = {node: ell[node]}
        for s in sub[1:]:
            level[s] = max(level[int(tree.parent[s])], ell[s])
        inner = [s for s in sub if not tree.is_terminal[s]]
        weights = tree.node_prob[inner] / tree.node_prob[node]
        rhs = float(np.dot(weights, f.evaluate(inner, [level[s] for s in inner]))) * tree.dt
        worst = max(worst, abs(y_hat.values[node] - rhs))
    return worst
