"""Data models for meanfield_repr."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse

from .errors import ConfigError, TreeError

PROB_TOL = 1e-12


def encode_real(value: float) -> Union[float, str]:
    """JSON-safe float: infinities become strings."""
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return float(value)


def decode_real(raw: Union[float, int, str]) -> float:
    if isinstance(raw, str):
        if raw in ("inf", "+inf"):
            return math.inf
        if raw == "-inf":
            return -math.inf
    return float(raw)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time grid t_k = k·T/N."""

    horizon: float = 1.0
    steps: int = 1

    def __post_init__(self) -> None:
        if not self.horizon > 0 or not math.isfinite(self.horizon):
            raise TreeError(f"时间跨度必须为正有限数：{self.horizon}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise TreeError(f"时间步数必须为正整数：{self.steps}")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    def time(self, k: int) -> float:
        return self.horizon * k / self.steps

    def times(self) -> np.ndarray:
        return self.horizon * np.arange(self.steps + 1) / self.steps

    def to_dict(self) -> Dict:
        return {"T": self.horizon, "N": self.steps}

    @classmethod
    def from_dict(cls, raw: Dict | None) -> "TimeGrid":
        if not raw:
            return cls()
        return cls(horizon=float(raw.get("T", 1.0)), steps=int(raw.get("N", 1)))


@dataclass(frozen=True)
class TreeNode:
    """One node of a scenario tree."""

    id: int
    t: int
    parent: Optional[int] = None
    children: Tuple[int, ...] = ()
    probs: Tuple[float, ...] = ()


@dataclass(frozen=True)
class PathRecord:
    """A root-to-leaf path with its probability and common-noise atom."""

    nodes: Tuple[int, ...]
    probability: float
    atom: int

    @property
    def leaf(self) -> int:
        return self.nodes[-1]


class ScenarioTree:
    """Finite filtered probability space on a uniform time grid.

    Nodes are identified by the integers ``0..n-1``. Common noise is a
    partition of the leaves into atoms labelled ``0..k-1``.
    """

    def __init__(
        self,
        grid: TimeGrid,
        nodes: Sequence[TreeNode],
        atoms: Optional[Mapping[int, int]] = None,
    ) -> None:
        self.grid = grid
        ordered = sorted(nodes, key=lambda node: node.id)
        if not ordered or [node.id for node in ordered] != list(range(len(ordered))):
            raise TreeError("节点编号必须为连续的 0..n-1")
        self.nodes: Tuple[TreeNode, ...] = tuple(ordered)
        n = len(ordered)
        roots = [node.id for node in ordered if node.parent is None]
        if len(roots) != 1:
            raise TreeError(f"场景树必须恰有一个根节点，实际为 {len(roots)} 个")
        self.root = roots[0]
        if ordered[self.root].t != 0:
            raise TreeError("根节点的时间索引必须为 0")

        times = np.array([node.t for node in ordered], dtype=int)
        parent = np.full(n, -1, dtype=int)
        branch = np.ones(n, dtype=float)
        for node in ordered:
            if not 0 <= node.t <= grid.steps:
                raise TreeError(f"节点 {node.id} 的时间索引越界：{node.t}")
            if len(node.children) != len(node.probs):
                raise TreeError(f"节点 {node.id} 的子节点与概率数量不一致")
            if node.t < grid.steps and not node.children:
                raise TreeError(f"非终端节点 {node.id} 缺少子节点")
            if node.t == grid.steps and node.children:
                raise TreeError(f"终端节点 {node.id} 不应有子节点")
            if node.children:
                probs = np.asarray(node.probs, dtype=float)
                if np.any(probs <= 0.0):
                    raise TreeError(f"节点 {node.id} 的分支概率必须严格为正")
                if abs(probs.sum() - 1.0) > PROB_TOL:
                    raise TreeError(f"节点 {node.id} 的分支概率之和不为 1：{probs.sum()!r}")
            for child, prob in zip(node.children, node.probs):
                if not 0 <= child < n:
                    raise TreeError(f"节点不存在：{child}")
                if ordered[child].parent != node.id or ordered[child].t != node.t + 1:
                    raise TreeError(f"节点 {child} 与父节点 {node.id} 的链接不一致")
                parent[child] = node.id
                branch[child] = float(prob)
        for node in ordered:
            if node.parent is not None and parent[node.id] != node.parent:
                raise TreeError(f"节点 {node.id} 未出现在其父节点的子节点列表中")

        self.times = times
        self.parent = parent
        self.branch_prob = branch
        self.children: Tuple[Tuple[int, ...], ...] = tuple(tuple(node.children) for node in ordered)

        node_prob = np.zeros(n, dtype=float)
        node_prob[self.root] = 1.0
        visited = 0
        order: List[int] = []
        queue = deque([self.root])
        while queue:
            current = queue.popleft()
            visited += 1
            order.append(current)
            for child in self.children[current]:
                node_prob[child] = node_prob[current] * branch[child]
                queue.append(child)
        if visited != n:
            raise TreeError("存在无法从根节点到达的节点")
        self.node_prob = node_prob
        self.layers: Tuple[np.ndarray, ...] = tuple(
            np.array(sorted(i for i in range(n) if times[i] == k), dtype=int)
            for k in range(grid.steps + 1)
        )
        self.leaves: Tuple[int, ...] = tuple(int(i) for i in self.layers[-1])
        self.is_terminal = times == grid.steps

        if atoms is None:
            atoms = {leaf: 0 for leaf in self.leaves}
        leaf_atom = {}
        for leaf in self.leaves:
            if leaf not in atoms:
                raise TreeError(f"叶子节点 {leaf} 缺少公共噪声原子标签")
            leaf_atom[leaf] = int(atoms[leaf])
        labels = sorted(set(leaf_atom.values()))
        if labels != list(range(len(labels))):
            raise TreeError(f"原子标签必须为连续的 0..k-1：{labels}")
        self.leaf_atom: Dict[int, int] = leaf_atom
        self.atom_count = len(labels)

        paths = []
        for leaf in self.leaves:
            chain = [leaf]
            while parent[chain[-1]] >= 0:
                chain.append(int(parent[chain[-1]]))
            chain.reverse()
            paths.append(PathRecord(tuple(chain), float(node_prob[leaf]), leaf_atom[leaf]))
        self.paths: Tuple[PathRecord, ...] = tuple(paths)
        self.atom_mass = np.array(
            [sum(p.probability for p in paths if p.atom == a) for a in range(self.atom_count)]
        )
        if abs(sum(p.probability for p in paths) - 1.0) > PROB_TOL * max(1, len(paths)):
            raise TreeError("路径概率之和不为 1")

        rows = [int(parent[i]) for i in range(n) if parent[i] >= 0]
        cols = [i for i in range(n) if parent[i] >= 0]
        data = [branch[i] for i in cols]
        self.transition = sparse.csr_matrix((data, (rows, cols)), shape=(n, n))

    @property
    def size(self) -> int:
        return len(self.nodes)

    @property
    def dt(self) -> float:
        return self.grid.dt

    def check_node(self, node: int) -> int:
        if not isinstance(node, (int, np.integer)) or not 0 <= node < self.size:
            raise TreeError(f"节点不存在：{node}")
        return int(node)

    def ancestors(self, node: int) -> List[int]:
        """Nodes from the root down to ``node`` inclusive."""
        chain = [self.check_node(node)]
        while self.parent[chain[-1]] >= 0:
            chain.append(int(self.parent[chain[-1]]))
        chain.reverse()
        return chain

    def subtree(self, node: int) -> List[int]:
        """``node`` and all its descendants, in breadth-first order."""
        out = []
        queue = deque([self.check_node(node)])
        while queue:
            current = queue.popleft()
            out.append(current)
            queue.extend(self.children[current])
        return out

    def is_chain(self) -> bool:
        return len(self.leaves) == 1

    def same_structure(self, other: "ScenarioTree") -> bool:
        if self is other:
            return True
        return (
            self.grid == other.grid
            and self.size == other.size
            and np.array_equal(self.parent, other.parent)
            and np.array_equal(self.branch_prob, other.branch_prob)
            and self.leaf_atom == other.leaf_atom
        )

    def to_dict(self) -> Dict:
        return {
            "grid": self.grid.to_dict(),
            "nodes": [
                {
                    "id": node.id,
                    "t": node.t,
                    "parent": node.parent,
                    "children": [{"id": c, "p": p} for c, p in zip(node.children, node.probs)],
                }
                for node in self.nodes
            ],
            "atoms": {str(leaf): atom for leaf, atom in sorted(self.leaf_atom.items())},
        }

    @classmethod
    def from_dict(cls, raw: Dict) -> "ScenarioTree":
        try:
            grid = TimeGrid.from_dict(raw.get("grid"))
            nodes = [
                TreeNode(
                    id=int(item["id"]),
                    t=int(item["t"]),
                    parent=None if item.get("parent") is None else int(item["parent"]),
                    children=tuple(int(c["id"]) for c in item.get("children", [])),
                    probs=tuple(float(c["p"]) for c in item.get("children", [])),
                )
                for item in raw["nodes"]
            ]
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, TreeError):
                raise
            raise TreeError(f"场景树格式错误：{exc}") from exc
        atoms_raw = raw.get("atoms")
        atoms = {int(k): int(v) for k, v in atoms_raw.items()} if atoms_raw else None
        return cls(grid, nodes, atoms)


@dataclass(frozen=True, eq=False)
class AdaptedProcess:
    """Node-indexed real values on a scenario tree."""

    tree: ScenarioTree
    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.values, dtype=float)
        if arr.shape != (self.tree.size,):
            raise TreeError(f"过程长度 {arr.shape} 与节点数 {self.tree.size} 不一致")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @classmethod
    def constant(cls, tree: ScenarioTree, value: float) -> "AdaptedProcess":
        return cls(tree, np.full(tree.size, float(value)))

    @classmethod
    def from_mapping(cls, tree: ScenarioTree, mapping: Mapping[int, float]) -> "AdaptedProcess":
        values = np.empty(tree.size)
        for node in range(tree.size):
            if node not in mapping:
                raise TreeError(f"过程缺少节点 {node} 的取值")
            values[node] = float(mapping[node])
        return cls(tree, values)

    @classmethod
    def from_times(cls, tree: ScenarioTree, per_time: Sequence[float]) -> "AdaptedProcess":
        """Deterministic process given by one value per time index."""
        per_time = np.asarray(per_time, dtype=float)
        return cls(tree, per_time[tree.times])

    def __getitem__(self, node: int) -> float:
        return float(self.values[self.tree.check_node(node)])

    def require_tree(self, tree: ScenarioTree) -> None:
        if not self.tree.same_structure(tree):
            raise TreeError("过程与场景树不匹配")

    def path_values(self, path: PathRecord) -> np.ndarray:
        return self.values[list(path.nodes)]

    def __add__(self, other: "AdaptedProcess") -> "AdaptedProcess":
        other.require_tree(self.tree)
        return AdaptedProcess(self.tree, self.values + other.values)

    def __sub__(self, other: "AdaptedProcess") -> "AdaptedProcess":
        other.require_tree(self.tree)
        return AdaptedProcess(self.tree, self.values - other.values)

    def __neg__(self) -> "AdaptedProcess":
        return AdaptedProcess(self.tree, -self.values)

    def scale(self, factor: float) -> "AdaptedProcess":
        return AdaptedProcess(self.tree, self.values * factor)

    def to_dict(self) -> Dict:
        return {str(i): encode_real(v) for i, v in enumerate(self.values)}

    @classmethod
    def from_dict(cls, tree: ScenarioTree, raw: Dict) -> "AdaptedProcess":
        return cls.from_mapping(tree, {int(k): decode_real(v) for k, v in raw.items()})


@dataclass(frozen=True, eq=False)
class StoppingTime:
    """Stopping time given by its stop region.

    Terminal nodes are always flagged and the region is closed under
    descent, so two stopping times are equal iff their regions are.
    """

    tree: ScenarioTree
    region: np.ndarray

    def __post_init__(self) -> None:
        flags = np.array(self.region, dtype=bool)
        if flags.shape != (self.tree.size,):
            raise TreeError("停时区域长度与节点数不一致")
        flags = flags | self.tree.is_terminal
        canon = flags.copy()
        for layer in self.tree.layers[1:]:
            canon[layer] |= canon[self.tree.parent[layer]]
        canon.setflags(write=False)
        object.__setattr__(self, "region", canon)

    @classmethod
    def from_stop_nodes(cls, tree: ScenarioTree, nodes: Iterable[int]) -> "StoppingTime":
        flags = np.zeros(tree.size, dtype=bool)
        for node in nodes:
            flags[tree.check_node(node)] = True
        return cls(tree, flags)

    @classmethod
    def at_time(cls, tree: ScenarioTree, k: int) -> "StoppingTime":
        return cls(tree, tree.times >= k)

    def stop_nodes(self) -> Tuple[int, ...]:
        parent_flag = np.zeros(self.tree.size, dtype=bool)
        has_parent = self.tree.parent >= 0
        parent_flag[has_parent] = self.region[self.tree.parent[has_parent]]
        return tuple(int(i) for i in np.flatnonzero(self.region & ~parent_flag))

    def stop_node(self, path: PathRecord) -> int:
        for node in path.nodes:
            if self.region[node]:
                return node
        return path.nodes[-1]

    def path_indices(self) -> np.ndarray:
        """Stopping time index on each path of the tree."""
        return np.array([self.tree.times[self.stop_node(p)] for p in self.tree.paths], dtype=int)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, StoppingTime):
            return NotImplemented
        return self.tree.same_structure(other.tree) and np.array_equal(self.region, other.region)

    def __hash__(self) -> int:
        return hash(self.region.tobytes())

    def to_dict(self) -> List[int]:
        return list(self.stop_nodes())

    @classmethod
    def from_dict(cls, tree: ScenarioTree, raw: Sequence[int]) -> "StoppingTime":
        return cls.from_stop_nodes(tree, [int(v) for v in raw])


@dataclass(frozen=True)
class VPlusPath:
    """Left-continuous nondecreasing step path with v(t_0) = -inf.

    ``values[k-1]`` is the value on ``(times[k-1], times[k]]``; beyond the
    last grid time the path stays flat.
    """

    times: Tuple[float, ...]
    values: Tuple[float, ...]

    def __post_init__(self) -> None:
        times = tuple(float(t) for t in self.times)
        values = tuple(float(v) for v in self.values)
        if len(times) != len(values) + 1 or len(values) < 1:
            raise ValueError("路径的时间点数必须比取值数多 1")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("路径时间点必须严格递增")
        if any(b < a for a, b in zip(values, values[1:])):
            raise ValueError("路径取值必须单调不减")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @property
    def horizon(self) -> float:
        return self.times[-1]

    def __call__(self, t: float) -> float:
        if t <= self.times[0]:
            return -math.inf
        k = int(np.searchsorted(self.times, t, side="left"))
        return self.values[min(k, len(self.values)) - 1]

    def evaluate(self, ts: np.ndarray) -> np.ndarray:
        ts = np.asarray(ts, dtype=float)
        idx = np.searchsorted(self.times, ts, side="left")
        idx = np.clip(idx, 1, len(self.values))
        out = np.asarray(self.values)[idx - 1]
        return np.where(ts <= self.times[0], -np.inf, out)

    @classmethod
    def from_lhat(cls, times: Sequence[float], lhat: Sequence[float]) -> "VPlusPath":
        """Build from node-ordered running-max values (first entry is -inf)."""
        return cls(tuple(times), tuple(lhat[1:]))

    def to_dict(self) -> Dict:
        return {"times": list(self.times), "values": [encode_real(v) for v in self.values], "v0": "-inf"}

    @classmethod
    def from_dict(cls, raw: Dict) -> "VPlusPath":
        return cls(tuple(raw["times"]), tuple(decode_real(v) for v in raw["values"]))


@dataclass(frozen=True)
class CompositeOutcome:
    """A (path, vector) outcome."""

    path: VPlusPath
    vector: Tuple[float, ...]


Outcome = Union[Tuple[float, ...], VPlusPath, CompositeOutcome]


@dataclass(frozen=True)
class AtomLaw:
    """Finite-support law conditional on one common-noise atom."""

    mass: float
    support: Tuple[Tuple[float, Outcome], ...]

    def __post_init__(self) -> None:
        weights = [w for w, _ in self.support]
        if not weights:
            raise ValueError("原子分布的支撑集为空")
        if any(w < 0 for w in weights):
            raise ValueError("分布权重不能为负")
        if abs(sum(weights) - 1.0) > PROB_TOL * max(1, len(weights)):
            raise ValueError(f"原子分布权重之和不为 1：{sum(weights)!r}")


@dataclass(frozen=True)
class RandomMeasure:
    """Per-atom finite-support distributions (a G-measurable random law)."""

    kind: str
    atoms: Tuple[AtomLaw, ...]

    def __post_init__(self) -> None:
        if self.kind not in ("vector", "path", "composite"):
            raise ValueError(f"未知的分布类型：{self.kind}")

    @property
    def atom_count(self) -> int:
        return len(self.atoms)

    def to_dict(self) -> Dict:
        def encode(outcome: Outcome):
            if isinstance(outcome, VPlusPath):
                return outcome.to_dict()
            if isinstance(outcome, CompositeOutcome):
                return {"path": outcome.path.to_dict(), "vector": list(outcome.vector)}
            return [encode_real(v) for v in outcome]

        return {
            "kind": self.kind,
            "atoms": [
                {
                    "weight_total": atom.mass,
                    "support": [{"w": w, "outcome": encode(o)} for w, o in atom.support],
                }
                for atom in self.atoms
            ],
        }

    @classmethod
    def from_dict(cls, raw: Dict) -> "RandomMeasure":
        kind = raw.get("kind", "vector")

        def decode(item) -> Outcome:
            if kind == "path":
                return VPlusPath.from_dict(item)
            if kind == "composite":
                return CompositeOutcome(VPlusPath.from_dict(item["path"]), tuple(item["vector"]))
            return tuple(decode_real(v) for v in item)

        atoms = tuple(
            AtomLaw(
                mass=float(atom["weight_total"]),
                support=tuple((float(s["w"]), decode(s["outcome"])) for s in atom["support"]),
            )
            for atom in raw["atoms"]
        )
        return cls(kind, atoms)


COMMANDS = (
    "represent",
    "mfg-timing",
    "mfg-singular",
    "mfg-consumption",
    "fixed-point",
    "stability",
    "metrics",
)


@dataclass
class RunConfig:
    """Command configuration."""

    command: str = "represent"
    inputs: Dict = field(default_factory=dict)
    level_grid: int = 257
    tol: float = 1e-6
    max_iter: int = 100
    damping: float = 1.0
    seed: Optional[int] = None
    quantization: bool = True
    truncation_terms: int = 20
    epsilon: float = 0.05
    oracle: bool = False
    output_dir: Optional[Path] = None
    format: str = "json"  # json or csv
    schema_version: int = 1

    def validate(self) -> "RunConfig":
        if self.command not in COMMANDS:
            raise ConfigError(f"未知命令：{self.command}", "command")
        if self.level_grid < 2:
            raise ConfigError(f"水平网格至少需要 2 个点：{self.level_grid}", "level_grid")
        if not self.tol > 0:
            raise ConfigError(f"容差必须为正：{self.tol}", "tol")
        if self.max_iter < 1:
            raise ConfigError(f"最大迭代次数必须至少为 1：{self.max_iter}", "max_iter")
        if not 0 < self.damping <= 1:
            raise ConfigError(f"阻尼系数必须位于 (0, 1]：{self.damping}", "damping")
        if self.truncation_terms < 1:
            raise ConfigError(f"截断项数必须至少为 1：{self.truncation_terms}", "truncation_terms")
        if not 0 < self.epsilon:
            raise ConfigError(f"阈值 ε 必须为正：{self.epsilon}", "epsilon")
        if self.format not in ("json", "csv"):
            raise ConfigError(f"未知输出格式：{self.format}", "format")
        if self.schema_version != 1:
            raise ConfigError(f"不支持的配置版本：{self.schema_version}", "schema_version")
        return self

    def to_dict(self) -> Dict:
        return {
            "command": self.command,
            "inputs": self.inputs,
            "level_grid": self.level_grid,
            "tol": self.tol,
            "max_iter": self.max_iter,
            "damping": self.damping,
            "seed": self.seed,
            "quantization": self.quantization,
            "truncation_terms": self.truncation_terms,
            "epsilon": self.epsilon,
            "oracle": self.oracle,
            "output_dir": str(self.output_dir) if self.output_dir else None,
            "format": self.format,
            "schema_version": self.schema_version,
        }

    @classmethod
    def from_dict(cls, raw: Dict | None) -> "RunConfig":
        if not raw:
            return cls()
        try:
            path = raw.get("output_dir")
            seed = raw.get("seed")
            return cls(
                command=raw.get("command", "represent"),
                inputs=dict(raw.get("inputs", {})),
                level_grid=int(raw.get("level_grid", 257)),
                tol=float(raw.get("tol", 1e-6)),
                max_iter=int(raw.get("max_iter", 100)),
                damping=float(raw.get("damping", 1.0)),
                seed=None if seed is None else int(seed),
                quantization=bool(raw.get("quantization", True)),
                truncation_terms=int(raw.get("truncation_terms", 20)),
                epsilon=float(raw.get("epsilon", 0.05)),
                oracle=bool(raw.get("oracle", False)),
                output_dir=Path(path) if path else None,
                format=raw.get("format", "json"),
                schema_version=int(raw.get("schema_version", 1)),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"配置字段类型错误：{exc}") from exc
