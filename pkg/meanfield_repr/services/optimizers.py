"""Optimizers derived from L̂: hitting times, singular control, consumption.

Timing conventions on the tree follow L̂: a control value stored at a
node is the level in force on the step that ends there, while the
satisfaction of a consumption plan at a node uses the level in force from
that node on.
"""
from __future__ import annotations

import itertools
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
from scipy import integrate

from ..models import AdaptedProcess, ScenarioTree, StoppingTime
from .generators import CallableGenerator, GeneratorSpec
from .representation import LhatResult, lhat_after

logger = logging.getLogger(__name__)

MONOTONE_TOL = 1e-12


def hitting_times(lhat: LhatResult, level: float) -> Tuple[StoppingTime, StoppingTime]:
    """Smallest and biggest optimal stopping times at ``level``.

    The step path L̂ is left-continuous, so inf{t : L̂_t ≥ ℓ} is the left end
    of the first step on which it holds: τ stops at the first node whose
    running max including itself reaches ℓ. τ′ uses the strict crossing.
    """
    tree = lhat.tree
    after = lhat_after(tree, lhat.lhat.values)
    tau = StoppingTime(tree, after >= level)
    tau_prime = StoppingTime(tree, after > level)
    return tau, tau_prime


def hitting_index(lhat_path: np.ndarray, level: float, strict: bool = False) -> int:
    """Time index of the first crossing on one path of node-ordered L̂ values."""
    values = np.asarray(lhat_path[1:], dtype=float)
    hits = values > level if strict else values >= level
    idx = np.flatnonzero(hits)
    return int(idx[0]) if idx.size else len(values)


@dataclass(eq=False)
class SingularControlSpec:
    """Monotone follower data: floor, cap, cost derivative c′ and control cost k."""

    floor: float
    cap: AdaptedProcess
    cost_derivative: GeneratorSpec
    control_cost: AdaptedProcess

    def __post_init__(self) -> None:
        tree = self.cap.tree
        self.control_cost.require_tree(tree)
        if np.any(self.cap.values < self.floor - MONOTONE_TOL):
            raise ValueError(f"控制上界低于下界 θ={self.floor}")
        inner = tree.parent >= 0
        if np.any(self.cap.values[inner] < self.cap.values[tree.parent[inner]] - MONOTONE_TOL):
            raise ValueError("控制上界过程必须沿路径单调不减")
        if np.any(np.abs(self.control_cost.values[tree.is_terminal]) > MONOTONE_TOL):
            raise ValueError("控制成本 k 在终端时刻必须为 0")

    @property
    def tree(self) -> ScenarioTree:
        return self.cap.tree

    def representation_inputs(self) -> Tuple[AdaptedProcess, GeneratorSpec]:
        """(Y, f) = (−k, c′)."""
        return -self.control_cost, self.cost_derivative


def singular_optimizer(
    lhat: Union[LhatResult, AdaptedProcess],
    spec: SingularControlSpec,
) -> AdaptedProcess:
    """Θ* = clamp(L̂, θ, Θ̄) node by node."""
    values = lhat.lhat.values if isinstance(lhat, LhatResult) else lhat.values
    theta = np.maximum(np.minimum(values, spec.cap.values), spec.floor)
    return AdaptedProcess(spec.tree, theta)


def singular_cost(tree: ScenarioTree, spec: SingularControlSpec, control: AdaptedProcess) -> float:
    """J(Θ) = E[Σ c(t, Θ) dt + Σ k_t ΔΘ], c gauged to vanish at the floor."""
    control.require_tree(tree)
    theta = control.values
    inner = np.flatnonzero(tree.parent >= 0)
    parents = tree.parent[inner]
    if np.any(theta[inner] < theta[parents] - MONOTONE_TOL):
        bad = int(inner[np.argmax(theta[parents] - theta[inner])])
        raise ValueError(f"控制过程非单调：节点 {bad}")
    total = 0.0
    dt = tree.dt
    k = spec.control_cost.values
    for node, parent in zip(inner, parents):
        running = spec.cost_derivative.antiderivative(int(parent), float(theta[node]), spec.floor)
        jump = k[parent] * (theta[node] - theta[parent])
        total += tree.node_prob[node] * (running * dt + jump)
    return float(total)


def enumerate_monotone_controls(
    tree: ScenarioTree,
    spec: SingularControlSpec,
    points: int = 21,
) -> Iterator[AdaptedProcess]:
    """Predictable monotone controls on a uniform grid of [θ, max Θ̄]."""
    grid = np.linspace(spec.floor, float(spec.cap.values.max()), points)
    inner = [int(n) for layer in tree.layers[:-1] for n in layer]

    def extend(idx: int, theta: np.ndarray) -> Iterator[np.ndarray]:
        if idx == len(inner):
            yield theta
            return
        node = inner[idx]
        children = tree.children[node]
        cap = min(spec.cap.values[c] for c in children)
        for value in grid:
            if value < theta[node] - MONOTONE_TOL or value > cap + MONOTONE_TOL:
                continue
            nxt = theta.copy()
            nxt[list(children)] = value
            yield from extend(idx + 1, nxt)

    start = np.full(tree.size, spec.floor)
    for theta in extend(0, start):
        yield AdaptedProcess(tree, theta)


def best_grid_control_cost(tree: ScenarioTree, spec: SingularControlSpec, points: int = 21) -> float:
    return min(singular_cost(tree, spec, control) for control in enumerate_monotone_controls(tree, spec, points))


class MarginalUtility(ABC):
    """Strictly decreasing positive map y ↦ u′(node, y) on y > 0."""

    @abstractmethod
    def __call__(self, node: int, y: float) -> float:
        ...

    @abstractmethod
    def integral(self, node: int, lower: float, upper: float) -> float:
        """∫_lower^upper u′(node, z) dz."""


class PowerMarginalUtility(MarginalUtility):
    """u′(y) = a·y^(−γ); γ = 1 is logarithmic utility."""

    def __init__(self, gamma: float = 1.0, scale: float = 1.0) -> None:
        if not gamma > 0 or not scale > 0:
            raise ValueError("边际效用参数必须为正")
        self.gamma = float(gamma)
        self.scale = float(scale)

    def __call__(self, node: int, y: float) -> float:
        return self.scale * y ** (-self.gamma)

    def integral(self, node: int, lower: float, upper: float) -> float:
        if self.gamma == 1.0:
            return self.scale * math.log(upper / lower)
        p = 1.0 - self.gamma
        return self.scale * (upper**p - lower**p) / p


class CallableMarginalUtility(MarginalUtility):
    def __init__(self, func: Callable[[int, float], float]) -> None:
        self.func = func

    def __call__(self, node: int, y: float) -> float:
        return float(self.func(node, y))

    def integral(self, node: int, lower: float, upper: float) -> float:
        value, _ = integrate.quad(lambda z: self.func(node, z), lower, upper, limit=200)
        return float(value)


@dataclass(eq=False)
class ConsumptionSpec:
    """Interest rate, discount, initial satisfaction, multiplier and u′."""

    rate: AdaptedProcess
    beta: float
    eta: float
    lam: float
    marginal_utility: MarginalUtility
    eta_bar: Optional[float] = None

    def __post_init__(self) -> None:
        if not self.beta > 0:
            raise ValueError(f"贴现率 β 必须为正：{self.beta}")
        if not self.eta > 0:
            raise ValueError(f"初始满意度 η 必须为正：{self.eta}")
        if not self.lam > 0:
            raise ValueError(f"拉格朗日乘子 λ 必须为正：{self.lam}")
        if self.eta_bar is not None and not self.eta_bar > self.eta:
            raise ValueError(f"满意度上界 η̄={self.eta_bar} 必须大于 η={self.eta}")

    @property
    def tree(self) -> ScenarioTree:
        return self.rate.tree

    def deflator(self) -> np.ndarray:
        """D_t = exp(−Σ_{s<t} r_s dt) per node."""
        tree = self.tree
        out = np.ones(tree.size)
        for layer in tree.layers[1:]:
            parents = tree.parent[layer]
            out[layer] = out[parents] * np.exp(-self.rate.values[parents] * tree.dt)
        return out

    def discount(self) -> np.ndarray:
        return np.exp(-self.beta * self.tree.grid.times()[self.tree.times])

    def representation_inputs(self) -> Tuple[AdaptedProcess, GeneratorSpec]:
        """Y = −λe^{−βt}D_t before the horizon (0 at terminal nodes) and the piecewise generator."""
        tree = self.tree
        disc = self.discount()
        y = -self.lam * disc * self.deflator()
        y[tree.is_terminal] = 0.0
        return AdaptedProcess(tree, y), consumption_generator(tree, self.beta, self.marginal_utility)


def consumption_generator(tree: ScenarioTree, beta: float, marginal_utility: MarginalUtility) -> GeneratorSpec:
    """f(t, ℓ) = −βe^{−βt}u′(t, −e^{−βt}/ℓ) for ℓ < 0 and ℓ otherwise."""
    times = tree.grid.times()[tree.times]

    def func(node: int, ell: float) -> float:
        if ell >= 0.0:
            return ell
        disc = math.exp(-beta * times[node])
        return -beta * disc * marginal_utility(node, -disc / ell)

    return CallableGenerator(tree, func, name="consumption")


def satisfaction_from_increments(tree: ScenarioTree, spec: ConsumptionSpec, increments: np.ndarray) -> np.ndarray:
    """Y^C_t = ηe^{−βt} + Σ_{s≤t} βe^{−β(t−s)}ΔC_s."""
    decay = math.exp(-spec.beta * tree.dt)
    y = np.empty(tree.size)
    y[tree.root] = spec.eta + spec.beta * increments[tree.root]
    for layer in tree.layers[1:]:
        y[layer] = decay * y[tree.parent[layer]] + spec.beta * increments[layer]
    return y


def increments_of(tree: ScenarioTree, consumption: AdaptedProcess) -> np.ndarray:
    c = consumption.values
    inc = c.copy()
    inner = tree.parent >= 0
    inc[inner] = c[inner] - c[tree.parent[inner]]
    if np.any(inc < -MONOTONE_TOL):
        raise ValueError("消费过程必须沿路径单调不减")
    return np.maximum(inc, 0.0)


def consumption_budget(tree: ScenarioTree, spec: ConsumptionSpec, consumption: AdaptedProcess) -> float:
    """b = E[Σ_{t<N} D_t ΔC_t]."""
    inc = increments_of(tree, consumption)
    inner = ~tree.is_terminal
    return float(np.sum(tree.node_prob[inner] * spec.deflator()[inner] * inc[inner]))


def satisfaction_level(levels: np.ndarray, eta: float, eta_bar: Optional[float] = None) -> np.ndarray:
    """η ∨ −1/ℓ, with ℓ clamped to [−1/η, −1/η̄] when the cap η̄ is given.

    Without a cap every level must be negative.
    """
    levels = np.asarray(levels, dtype=float)
    if eta_bar is None:
        if np.any(levels >= 0.0):
            index = int(np.argmax(levels >= 0.0))
            raise ValueError(f"L̂ 在位置 {index} 处非负（{levels[index]:.6g}），不满足消费表示的负性条件")
        return np.maximum(eta, -1.0 / levels)
    clamped = np.clip(levels, -1.0 / eta, -1.0 / eta_bar)
    return np.maximum(eta, -1.0 / clamped)


def consumption_from_lhat(
    lhat: LhatResult,
    spec: ConsumptionSpec,
) -> Tuple[AdaptedProcess, AdaptedProcess, float]:
    """Satisfaction Y^C = e^{−βt}(η ∨ −1/L̂), cumulative consumption C and its budget.

    With ``spec.eta_bar`` set, L̂ is clamped to the band [−1/η, −1/η̄] first.
    """
    tree = lhat.tree
    after = lhat_after(tree, lhat.lhat.values)
    satisfaction = spec.discount() * satisfaction_level(after, spec.eta, spec.eta_bar)
    decay = math.exp(-spec.beta * tree.dt)
    inc = np.empty(tree.size)
    inc[tree.root] = (satisfaction[tree.root] - spec.eta) / spec.beta
    for layer in tree.layers[1:]:
        inc[layer] = (satisfaction[layer] - decay * satisfaction[tree.parent[layer]]) / spec.beta
    slack = MONOTONE_TOL * max(1.0, float(np.abs(satisfaction).max()))
    if np.any(inc < -slack):
        node = int(np.argmin(inc))
        raise ValueError(f"消费增量在节点 {node} 处为负（{inc[node]:.6g}），L̂ 沿路径不是单调不减的")
    if np.any(inc < 0.0):
        logger.debug("clipping consumption increments down to %.3g", float(inc.min()))
    inc = np.maximum(inc, 0.0)
    cumulative = inc.copy()
    for layer in tree.layers[1:]:
        cumulative[layer] += cumulative[tree.parent[layer]]
    plan = AdaptedProcess(tree, cumulative)
    return AdaptedProcess(tree, satisfaction), plan, consumption_budget(tree, spec, plan)


def consumption_utility(tree: ScenarioTree, spec: ConsumptionSpec, consumption: AdaptedProcess) -> float:
    """U(C) = E[Σ_{t<N} u(t, Y^C_t) dt], u gauged to vanish at the floor ηe^{−βt}."""
    consumption.require_tree(tree)
    inc = increments_of(tree, consumption)
    y = satisfaction_from_increments(tree, spec, inc)
    floor = spec.eta * spec.discount()
    total = 0.0
    for node in range(tree.size):
        if tree.is_terminal[node]:
            continue
        total += tree.node_prob[node] * spec.marginal_utility.integral(node, floor[node], y[node]) * tree.dt
    return float(total)


def estimate_budget_truncation(spec: ConsumptionSpec) -> float:
    """Discounted tail mass e^{−βT}/β · u′ at the satisfaction floor ηe^{−βT}."""
    horizon = spec.tree.grid.horizon
    disc = math.exp(-spec.beta * horizon)
    return disc / spec.beta * spec.marginal_utility(spec.tree.root, spec.eta * disc)
