"""Strictly increasing per-node generators ℓ ↦ f(t, ω, ℓ)."""
from __future__ import annotations

import logging
import math
from abc import ABC, abstractmethod
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate, optimize

from ..errors import GeneratorError
from ..models import AdaptedProcess, ScenarioTree

logger = logging.getLogger(__name__)

MONOTONE_TOL = 1e-12


class GeneratorSpec(ABC):
    """Base class: a strictly increasing map of the level at every node."""

    def __init__(self, tree: ScenarioTree) -> None:
        self.tree = tree

    @abstractmethod
    def values_at(self, ell: float, nodes: Optional[Sequence[int]] = None) -> np.ndarray:
        """f(node, ell) for the given nodes (all nodes by default)."""

    @abstractmethod
    def slope_bounds(self) -> Tuple[float, float]:
        """Global lower / upper bounds on the slope in ℓ."""

    def value(self, node: int, ell: float) -> float:
        return float(self.values_at(ell, [self.tree.check_node(node)])[0])

    def evaluate(self, nodes: Sequence[int], ells: Sequence[float]) -> np.ndarray:
        """f(nodes[i], ells[i]) element-wise."""
        return np.array([self.value(node, ell) for node, ell in zip(nodes, ells)], dtype=float)

    def breakpoints(self) -> np.ndarray:
        return np.empty(0)

    def invert(self, node: int, target: float) -> float:
        """The level ℓ with f(node, ℓ) = target."""
        return solve_increasing(lambda ell: self.value(node, ell) - target, scale=abs(target))

    def antiderivative(self, node: int, x: float, ref: float) -> float:
        """∫_ref^x f(node, y) dy, exact for piecewise-linear generators."""
        if x == ref:
            return 0.0
        lo, hi = min(x, ref), max(x, ref)
        knots = self.breakpoints()
        pts = np.unique(np.concatenate(([lo, hi], knots[(knots > lo) & (knots < hi)])))
        vals = np.array([self.value(node, p) for p in pts])
        total = float(integrate.trapezoid(vals, pts))
        return total if x > ref else -total

    def check_monotone(self, levels: Sequence[float]) -> None:
        levels = np.asarray(levels, dtype=float)
        rows = np.column_stack([self.values_at(ell) for ell in levels])
        gaps = np.diff(rows, axis=1)
        if gaps.size and np.any(gaps <= 0):
            node, idx = np.argwhere(gaps <= 0)[0]
            raise GeneratorError(
                f"生成元在节点 {node} 处非严格递增：ℓ={levels[idx]:.6g} → {levels[idx + 1]:.6g}"
            )

    @abstractmethod
    def to_dict(self) -> Dict:
        ...


class Affine(GeneratorSpec):
    """f(t, ω, ℓ) = a(t, ω) + b·ℓ with b > 0."""

    def __init__(self, a: AdaptedProcess, b: float = 1.0) -> None:
        super().__init__(a.tree)
        if not b > 0 or not math.isfinite(b):
            raise GeneratorError(f"仿射生成元斜率必须为正：{b}")
        self.a = a
        self.b = float(b)

    @classmethod
    def identity(cls, tree: ScenarioTree) -> "Affine":
        return cls(AdaptedProcess.constant(tree, 0.0), 1.0)

    def values_at(self, ell: float, nodes: Optional[Sequence[int]] = None) -> np.ndarray:
        a = self.a.values if nodes is None else self.a.values[list(nodes)]
        return a + self.b * ell

    def evaluate(self, nodes: Sequence[int], ells: Sequence[float]) -> np.ndarray:
        return self.a.values[list(nodes)] + self.b * np.asarray(ells, dtype=float)

    def slope_bounds(self) -> Tuple[float, float]:
        return self.b, self.b

    def invert(self, node: int, target: float) -> float:
        return (target - self.a[node]) / self.b

    def to_dict(self) -> Dict:
        return {"kind": "affine", "a": self.a.to_dict(), "b": self.b}


class TableMonotone(GeneratorSpec):
    """Piecewise-linear table on increasing knots, affine with slope ``slope`` outside."""

    def __init__(
        self,
        tree: ScenarioTree,
        knots: Sequence[float],
        rows: np.ndarray,
        slope: float = 1.0,
    ) -> None:
        super().__init__(tree)
        knots = np.asarray(knots, dtype=float)
        rows = np.asarray(rows, dtype=float)
        if knots.ndim != 1 or knots.size < 2 or np.any(np.diff(knots) <= 0):
            raise GeneratorError("表格生成元的节点必须严格递增且至少两个")
        if rows.shape != (tree.size, knots.size):
            raise GeneratorError(f"表格形状 {rows.shape} 与 ({tree.size}, {knots.size}) 不一致")
        if not slope > 0:
            raise GeneratorError(f"外推斜率必须为正：{slope}")
        if np.any(np.diff(rows, axis=1) < MONOTONE_TOL * slope):
            raise GeneratorError("表格生成元的取值必须沿 ℓ 严格递增")
        self.knots = knots
        self.rows = rows
        self.slope = float(slope)
        self._segment_slopes = np.diff(rows, axis=1) / np.diff(knots)

    def breakpoints(self) -> np.ndarray:
        return self.knots

    def values_at(self, ell: float, nodes: Optional[Sequence[int]] = None) -> np.ndarray:
        rows = self.rows if nodes is None else self.rows[list(nodes)]
        if ell <= self.knots[0]:
            return rows[:, 0] + self.slope * (ell - self.knots[0])
        if ell >= self.knots[-1]:
            return rows[:, -1] + self.slope * (ell - self.knots[-1])
        j = int(np.searchsorted(self.knots, ell, side="right")) - 1
        w = (ell - self.knots[j]) / (self.knots[j + 1] - self.knots[j])
        return rows[:, j] * (1.0 - w) + rows[:, j + 1] * w

    def slope_bounds(self) -> Tuple[float, float]:
        return (
            min(self.slope, float(self._segment_slopes.min())),
            max(self.slope, float(self._segment_slopes.max())),
        )

    def to_dict(self) -> Dict:
        return {
            "kind": "table",
            "knots": self.knots.tolist(),
            "values": {str(i): row.tolist() for i, row in enumerate(self.rows)},
            "slope": self.slope,
        }


class CallableGenerator(GeneratorSpec):
    """Generator backed by a callable ``func(node, ell)``."""

    def __init__(
        self,
        tree: ScenarioTree,
        func: Callable[[int, float], float],
        slopes: Tuple[float, float] = (1.0, 1.0),
        name: str = "callable",
    ) -> None:
        super().__init__(tree)
        self.func = func
        self._slopes = slopes
        self.name = name

    def values_at(self, ell: float, nodes: Optional[Sequence[int]] = None) -> np.ndarray:
        nodes = range(self.tree.size) if nodes is None else nodes
        return np.array([self.func(int(node), ell) for node in nodes], dtype=float)

    def slope_bounds(self) -> Tuple[float, float]:
        return self._slopes

    def antiderivative(self, node: int, x: float, ref: float) -> float:
        value, _ = integrate.quad(lambda y: self.func(node, y), ref, x, limit=200)
        return float(value)

    def to_dict(self) -> Dict:
        return {"kind": "callable", "name": self.name, "slopes": list(self._slopes)}


def solve_increasing(func: Callable[[float], float], scale: float = 0.0, tol: float = 1e-13) -> float:
    """Root of an increasing function, growing the bracket [-B, B] by doubling."""
    bound = 1.0 + abs(scale)
    for _ in range(200):
        lo, hi = func(-bound), func(bound)
        if lo <= 0.0 <= hi:
            if lo == 0.0:
                return -bound
            if hi == 0.0:
                return bound
            return float(optimize.brentq(func, -bound, bound, xtol=tol, rtol=4 * np.finfo(float).eps, maxiter=500))
        bound *= 2.0
        logger.debug("bracket grown to ±%g", bound)
    raise GeneratorError("单调方程在搜索区间内无根，生成元可能不满足值域条件")


def generator_from_dict(tree: ScenarioTree, raw: Dict) -> GeneratorSpec:
    kind = raw.get("kind", "affine")
    if kind == "affine":
        a = raw.get("a", 0.0)
        proc = AdaptedProcess.constant(tree, float(a)) if isinstance(a, (int, float)) else AdaptedProcess.from_dict(tree, a)
        return Affine(proc, float(raw.get("b", 1.0)))
    if kind == "table":
        rows = np.array([raw["values"][str(i)] for i in range(tree.size)], dtype=float)
        return TableMonotone(tree, raw["knots"], rows, float(raw.get("slope", 1.0)))
    raise GeneratorError(f"无法从配置构造生成元类型：{kind}")
