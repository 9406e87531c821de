"""Scenario-tree operations: conditional expectations, stopping times, lattices."""
from __future__ import annotations

import itertools
import logging
import math
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..errors import EnumerationRefused, TreeError
from ..models import AdaptedProcess, ScenarioTree, StoppingTime, TimeGrid, TreeNode

logger = logging.getLogger(__name__)

DEFAULT_MAX_PATHS = 64

Coefficient = Union[float, Callable[[float, float], float]]
StopSet = Tuple[int, ...]


def chain_tree(grid: TimeGrid) -> ScenarioTree:
    """Deterministic tree: one node per time index."""
    nodes = [
        TreeNode(
            id=k,
            t=k,
            parent=None if k == 0 else k - 1,
            children=(k + 1,) if k < grid.steps else (),
            probs=(1.0,) if k < grid.steps else (),
        )
        for k in range(grid.steps + 1)
    ]
    return ScenarioTree(grid, nodes)


def uniform_tree(
    grid: TimeGrid,
    branching: int = 2,
    probs: Optional[Sequence[float]] = None,
    atoms_from_first_branch: bool = False,
) -> ScenarioTree:
    """Full tree with identical branching at every node.

    With ``atoms_from_first_branch`` the common-noise atoms are the
    subtrees of the root's children.
    """
    if branching < 1:
        raise TreeError(f"分支数必须至少为 1：{branching}")
    probs = tuple(probs) if probs is not None else tuple([1.0 / branching] * branching)
    if len(probs) != branching:
        raise TreeError("分支概率数量与分支数不一致")
    nodes: List[TreeNode] = []
    first_branch: Dict[int, int] = {0: -1}
    frontier = [0]
    pending = {0: (0, None)}
    next_id = 1
    for k in range(grid.steps + 1):
        new_frontier = []
        for node_id in frontier:
            t, parent = pending[node_id]
            if k < grid.steps:
                children = tuple(range(next_id, next_id + branching))
                next_id += branching
                for j, child in enumerate(children):
                    pending[child] = (k + 1, node_id)
                    first_branch[child] = j if node_id == 0 else first_branch[node_id]
                new_frontier.extend(children)
                nodes.append(TreeNode(node_id, t, parent, children, probs))
            else:
                nodes.append(TreeNode(node_id, t, parent))
        frontier = new_frontier
    atoms = None
    if atoms_from_first_branch:
        atoms = {leaf: max(first_branch[leaf], 0) for leaf in frontier_leaves(nodes, grid.steps)}
    return ScenarioTree(grid, nodes, atoms)


def frontier_leaves(nodes: Sequence[TreeNode], steps: int) -> List[int]:
    return [node.id for node in nodes if node.t == steps]


def random_tree(
    rng: np.random.Generator,
    steps: int,
    max_branch: int = 2,
    horizon: float = 1.0,
    atom_count: int = 1,
) -> ScenarioTree:
    """Random tree with 1..max_branch children per node and random probabilities."""
    grid = TimeGrid(horizon, steps)
    nodes: List[TreeNode] = []
    pending = [(0, 0, None)]
    next_id = 1
    specs: Dict[int, Tuple[int, Optional[int], Tuple[int, ...], Tuple[float, ...]]] = {}
    while pending:
        node_id, t, parent = pending.pop(0)
        if t < steps:
            count = int(rng.integers(1, max_branch + 1))
            children = tuple(range(next_id, next_id + count))
            next_id += count
            raw = rng.uniform(0.2, 1.0, size=count)
            probs = raw / raw.sum()
            probs[-1] = 1.0 - probs[:-1].sum()
            specs[node_id] = (t, parent, children, tuple(float(p) for p in probs))
            pending.extend((child, t + 1, node_id) for child in children)
        else:
            specs[node_id] = (t, parent, (), ())
    for node_id in sorted(specs):
        t, parent, children, probs = specs[node_id]
        nodes.append(TreeNode(node_id, t, parent, children, probs))
    leaves = frontier_leaves(nodes, steps)
    atom_count = max(1, min(atom_count, len(leaves)))
    atoms = {leaf: i * atom_count // len(leaves) for i, leaf in enumerate(leaves)}
    return ScenarioTree(grid, nodes, atoms)


def backward_expectation(tree: ScenarioTree, values: np.ndarray, of_time: int) -> np.ndarray:
    """Array whose entries at nodes with t ≤ of_time hold E[values_{of_time} | node]."""
    out = np.array(values, dtype=float, copy=True)
    for k in range(of_time - 1, -1, -1):
        layer = tree.layers[k]
        out[layer] = tree.transition[layer] @ out
    return out


def one_step_expectation(tree: ScenarioTree, values: np.ndarray) -> np.ndarray:
    """E[values at children | node] for every node (terminal nodes give 0)."""
    return tree.transition @ np.asarray(values, dtype=float)


def conditional_expectation(
    tree: ScenarioTree,
    proc: AdaptedProcess,
    at_node: int,
    of_time: int,
) -> float:
    """Probability-weighted average of ``proc`` over descendants of ``at_node`` at ``of_time``."""
    node = tree.check_node(at_node)
    proc.require_tree(tree)
    if not tree.times[node] <= of_time <= tree.grid.steps:
        raise TreeError(f"时间索引越界：{of_time}（节点 {node} 位于 t={tree.times[node]}）")
    return float(backward_expectation(tree, proc.values, of_time)[node])


def stopping_time_count(tree: ScenarioTree) -> int:
    """Number of stopping times: a node contributes 1 + product over its children."""
    counts = [1] * tree.size
    for layer in reversed(tree.layers[:-1]):
        for node in layer:
            counts[node] = 1 + math.prod(counts[c] for c in tree.children[node])
    return counts[tree.root]


def _stop_set_table(tree: ScenarioTree) -> List[List[StopSet]]:
    table: List[List[StopSet]] = [[] for _ in range(tree.size)]
    for layer in reversed(tree.layers):
        for node in layer:
            table[node] = [(int(node),)] + later_stop_sets(tree, int(node), table)
    return table


def later_stop_sets(
    tree: ScenarioTree,
    node: int,
    table: Optional[List[List[StopSet]]] = None,
) -> List[StopSet]:
    """Stop-node sets of all stopping times strictly later than ``node`` on its subtree."""
    children = tree.children[node]
    if not children:
        return []
    if table is None:
        table = _stop_set_table(tree)
    return [
        tuple(sorted(itertools.chain.from_iterable(combo)))
        for combo in itertools.product(*(table[c] for c in children))
    ]


def guard_paths(tree: ScenarioTree, max_paths: int) -> None:
    if len(tree.paths) > max_paths:
        raise EnumerationRefused(
            f"场景树共有 {len(tree.paths)} 条路径，超过穷举上限 {max_paths}",
            paths=len(tree.paths),
            limit=max_paths,
        )


def enumerate_stopping_times(tree: ScenarioTree, max_paths: int = DEFAULT_MAX_PATHS) -> List[StoppingTime]:
    """All stopping times of the tree."""
    guard_paths(tree, max_paths)
    table = _stop_set_table(tree)
    result = [StoppingTime.from_stop_nodes(tree, stops) for stops in table[tree.root]]
    logger.debug("enumerated %d stopping times on %d paths", len(result), len(tree.paths))
    return result


def running_sum(tree: ScenarioTree, integrand: AdaptedProcess, upto: StoppingTime) -> np.ndarray:
    """Per-path Σ_{s<τ} integrand(s)·dt, aligned with ``tree.paths``."""
    integrand.require_tree(tree)
    if not upto.tree.same_structure(tree):
        raise TreeError("停时与场景树不匹配")
    out = np.zeros(len(tree.paths))
    for i, path in enumerate(tree.paths):
        total = 0.0
        for node in path.nodes:
            if upto.region[node]:
                break
            total += integrand.values[node] * tree.dt
        out[i] = total
    return out


def expectation_over_paths(tree: ScenarioTree, per_path: np.ndarray) -> float:
    return float(np.dot([p.probability for p in tree.paths], per_path))


def _coefficient(value: Coefficient) -> Callable[[float, float], float]:
    if callable(value):
        return value
    constant = float(value)
    return lambda t, x: constant


def build_lattice_from_sde(
    b: Coefficient,
    sigma: Coefficient,
    x0: float,
    grid: TimeGrid,
    branching: int = 2,
) -> Tuple[ScenarioTree, AdaptedProcess]:
    """Non-recombining Euler lattice with equal branch weights.

    Offsets are the standardized points of ``linspace(-1, 1, branching)``,
    so each step matches mean x + b·dt and variance σ²·dt.
    """
    if branching < 2:
        raise TreeError(f"格点分支数必须至少为 2：{branching}")
    drift, vol = _coefficient(b), _coefficient(sigma)
    raw = np.linspace(-1.0, 1.0, branching)
    offsets = raw / raw.std()
    tree = uniform_tree(grid, branching)
    x = np.empty(tree.size)
    x[tree.root] = x0
    dt = grid.dt
    for k, layer in enumerate(tree.layers[:-1]):
        t = grid.time(k)
        for node in layer:
            mu, sd = drift(t, x[node]), vol(t, x[node])
            if not (math.isfinite(mu) and math.isfinite(sd)):
                raise TreeError(f"SDE 系数在 t={t}, x={x[node]} 处非有限")
            for j, child in enumerate(tree.children[node]):
                x[child] = x[node] + mu * dt + sd * math.sqrt(dt) * offsets[j]
    return tree, AdaptedProcess(tree, x)


def normalize_terminal(tree: ScenarioTree, Y: AdaptedProcess) -> Tuple[AdaptedProcess, AdaptedProcess]:
    """Split Y into Ŷ = Y − E[Y_T | F_t] (zero at terminal nodes) and the martingale part."""
    Y.require_tree(tree)
    martingale = backward_expectation(tree, Y.values, tree.grid.steps)
    return AdaptedProcess(tree, Y.values - martingale), AdaptedProcess(tree, martingale)


def is_supermartingale(tree: ScenarioTree, proc: AdaptedProcess, tol: float = 1e-10) -> bool:
    """Whether E[proc_{t+1} | F_t] ≤ proc_t at every non-terminal node."""
    nxt = one_step_expectation(tree, proc.values)
    inner = ~tree.is_terminal
    return bool(np.all(nxt[inner] <= proc.values[inner] + tol))
