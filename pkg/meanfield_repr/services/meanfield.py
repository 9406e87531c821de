"""Fixed-point engines for the mean-field representation.

For a measure m the adapter supplies (X^m, Y^m, f^m); the image Φ(m) is
the conditional law, given the common-noise atoms, of Ψ(X^m, L̂^m) where
L̂^m represents Y^m with generator f^m. A solution is a fixed point of Φ.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import optimize

from ..errors import AdapterError, GeneratorError, OrderViolation, TreeError
from ..models import (
    AdaptedProcess,
    AtomLaw,
    CompositeOutcome,
    Outcome,
    PathRecord,
    RandomMeasure,
    ScenarioTree,
    VPlusPath,
    encode_real,
)
from .generators import GeneratorSpec, solve_increasing
from .metrics_order import (
    canonical_support,
    conditional_law,
    measures_equal,
    mix_measures,
    random_measure_distance,
    random_measure_leq,
    sample_ordered_pair,
)
from .prob_tree import is_supermartingale
from .representation import DEFAULT_LEVELS, LhatResult, default_levels, result_from_ell, solve_representation

logger = logging.getLogger(__name__)

TERMINAL_TOL = 1e-12
AUDIT_TOL = 1e-10
DERIVATIVE_MARGIN = 1e-6
DERIVATIVE_SAMPLES = 10_000


@dataclass(frozen=True)
class AdapterOutput:
    """(X^m, Y^m, f^m) for one measure."""

    X: AdaptedProcess
    Y: AdaptedProcess
    f: GeneratorSpec


Adapter = Callable[[RandomMeasure], AdapterOutput]
Psi = Callable[[PathRecord, np.ndarray, VPlusPath], Outcome]


def path_psi(path: PathRecord, x: np.ndarray, lhat: VPlusPath) -> Outcome:
    return lhat


def clamp_psi(lower: float, upper: float, kind: str = "path") -> Psi:
    """Ψ(l) = lower ∨ l ∧ upper, increasing in l."""
    if lower > upper:
        raise ValueError(f"截断区间为空：[{lower}, {upper}]")

    def psi(path: PathRecord, x: np.ndarray, lhat: VPlusPath) -> Outcome:
        values = tuple(float(v) for v in np.clip(lhat.values, lower, upper))
        return VPlusPath(lhat.times, values) if kind == "path" else values

    return psi


def fill_outcome(outcome: Outcome, value: float) -> Outcome:
    """Outcome of the same shape with every coordinate equal to ``value``."""
    if isinstance(outcome, VPlusPath):
        return VPlusPath(outcome.times, (value,) * len(outcome.values))
    if isinstance(outcome, CompositeOutcome):
        return CompositeOutcome(fill_outcome(outcome.path, value), (value,) * len(outcome.vector))
    return (float(value),) * len(outcome)


def grid_quantizer(grid: Sequence[float]) -> Callable[[Outcome], Outcome]:
    """Clamp into [grid[0], grid[-1]] and floor onto the grid (an increasing map)."""
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2 or np.any(np.diff(grid) <= 0):
        raise ValueError("量化网格必须严格递增且至少两个点")

    def snap(values: Sequence[float]) -> Tuple[float, ...]:
        arr = np.clip(np.asarray(values, dtype=float), grid[0], grid[-1])
        idx = np.searchsorted(grid, arr, side="right") - 1
        return tuple(float(v) for v in grid[np.clip(idx, 0, grid.size - 1)])

    def quantize(outcome: Outcome) -> Outcome:
        if isinstance(outcome, VPlusPath):
            return VPlusPath(outcome.times, snap(outcome.values))
        if isinstance(outcome, CompositeOutcome):
            return CompositeOutcome(quantize(outcome.path), snap(outcome.vector))
        return snap(outcome)

    return quantize


def map_measure(measure: RandomMeasure, func: Callable[[Outcome], Outcome]) -> RandomMeasure:
    atoms = tuple(
        AtomLaw(atom.mass, canonical_support([(w, func(o)) for w, o in atom.support]))
        for atom in measure.atoms
    )
    return RandomMeasure(measure.kind, atoms)


def check_adapter_output(tree: ScenarioTree, out: AdapterOutput) -> None:
    """Adapter contract: processes on the tree, terminal-zero Y, strictly increasing f."""
    try:
        out.X.require_tree(tree)
        out.Y.require_tree(tree)
    except TreeError as exc:
        raise AdapterError(f"适配器输出与场景树不匹配：{exc}") from exc
    tail = np.abs(out.Y.values[tree.is_terminal])
    if tail.size and float(tail.max()) > TERMINAL_TOL:
        raise AdapterError(f"适配器输出的 Y 在终端时刻不为 0（最大偏差 {tail.max():.3g}）")
    span = 1.0 + float(np.max(np.abs(out.Y.values))) / tree.dt
    try:
        out.f.check_monotone(np.linspace(-span, span, 5))
    except GeneratorError as exc:
        raise AdapterError(f"适配器输出的生成元非严格递增：{exc}") from exc


@dataclass(eq=False)
class MeanFieldProblem:
    """Tree, adapter m ↦ (X, Y, f), outcome functional Ψ and solver knobs."""

    tree: ScenarioTree
    adapter: Adapter
    psi: Psi = path_psi
    kind: str = "path"
    level_count: int = DEFAULT_LEVELS
    levels: Optional[np.ndarray] = None
    oracle: bool = False
    quantizer: Optional[Callable[[Outcome], Outcome]] = None

    def query(self, measure: RandomMeasure) -> AdapterOutput:
        if measure.atom_count != self.tree.atom_count:
            raise AdapterError(f"测度的原子数量 {measure.atom_count} 与公共噪声划分 {self.tree.atom_count} 不一致")
        out = self.adapter(measure)
        check_adapter_output(self.tree, out)
        return out

    def represent(self, out: AdapterOutput) -> LhatResult:
        return solve_representation(
            self.tree, out.Y, out.f, oracle=self.oracle, levels=self.levels, count=self.level_count
        )

    def image(self, measure: RandomMeasure) -> Tuple[RandomMeasure, LhatResult, AdapterOutput]:
        """Φ(m) together with the representation it was read from."""
        out = self.query(measure)
        lhat = self.represent(out)
        law = conditional_law(
            self.tree,
            lambda path: self.psi(path, out.X.path_values(path), lhat.path(path)),
            self.kind,
        )
        if self.quantizer is not None:
            law = map_measure(law, self.quantizer)
        return law, lhat, out


@dataclass(eq=False)
class FixedPointReport:
    """Fixed-point candidate with its residual certificate."""

    m_star: RandomMeasure
    lhat_star: LhatResult
    residual_consistency: float
    residual_representation: float
    iterations: int
    trace: List[float] = field(default_factory=list)
    converged: bool = False
    engine: str = "picard"
    iterates: List[RandomMeasure] = field(default_factory=list)
    notes: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            "engine": self.engine,
            "converged": self.converged,
            "iterations": self.iterations,
            "residual_consistency": encode_real(self.residual_consistency),
            "residual_representation": encode_real(self.residual_representation),
            "trace": [encode_real(v) for v in self.trace],
            "m_star": self.m_star.to_dict(),
            "lhat_star": self.lhat_star.to_dict(),
            "notes": list(self.notes),
        }


def _residual_representation(lhat: LhatResult) -> float:
    return float(lhat.diagnostics.get("residual", 0.0))


def picard_solve(
    problem: MeanFieldProblem,
    m0: RandomMeasure,
    damping: float = 1.0,
    tol: float = 1e-6,
    max_iter: int = 100,
) -> FixedPointReport:
    """Damped iteration m ← (1 − damping)·m + damping·Φ(m).

    Stops once consecutive iterates are within ``tol`` in the Lévy–Prokhorov
    distance. Failure to converge is reported, not raised.
    """
    if not 0 < damping <= 1:
        raise ValueError(f"阻尼系数必须位于 (0, 1]：{damping}")
    if not tol > 0 or max_iter < 1:
        raise ValueError("容差必须为正且最大迭代次数至少为 1")
    measure = m0
    trace: List[float] = []
    converged = False
    for k in range(1, max_iter + 1):
        image, _, _ = problem.image(measure)
        nxt = mix_measures(measure, image, damping)
        gap = random_measure_distance(nxt, measure)
        trace.append(gap)
        logger.debug("picard iteration %d: gap %.3e", k, gap)
        measure = nxt
        if gap < tol:
            converged = True
            break
    image, lhat, _ = problem.image(measure)
    residual = 0.0 if measures_equal(image, measure) else random_measure_distance(measure, image)
    report = FixedPointReport(
        m_star=measure,
        lhat_star=lhat,
        residual_consistency=residual,
        residual_representation=_residual_representation(lhat),
        iterations=len(trace),
        trace=trace,
        converged=converged,
        engine="picard",
    )
    if converged:
        logger.info("picard converged after %d iterations (residual %.3e)", len(trace), residual)
    else:
        report.notes.append(f"达到最大迭代次数 {max_iter} 仍未收敛")
        logger.warning("picard did not converge within %d iterations (last gap %.3e)", max_iter, trace[-1])
    return report


def lattice_bounds(
    problem: MeanFieldProblem,
    probe: RandomMeasure,
    lower: Optional[float] = None,
    upper: Optional[float] = None,
) -> Tuple[RandomMeasure, RandomMeasure]:
    """Bottom and top of the outcome lattice as per-atom point masses.

    Without explicit bounds the one-step roots of the adapter output at
    ``probe`` are used, which bracket L.
    """
    template, _, out = problem.image(probe)
    if lower is None or upper is None:
        roots = default_levels(problem.tree, out.Y, out.f, count=2)
        lower = float(roots[0]) if lower is None else lower
        upper = float(roots[-1]) if upper is None else upper
    bottom = map_measure(template, lambda o: fill_outcome(o, lower))
    top = map_measure(template, lambda o: fill_outcome(o, upper))
    if problem.quantizer is not None:
        bottom, top = map_measure(bottom, problem.quantizer), map_measure(top, problem.quantizer)
    return bottom, top


def tarski_solve(
    problem: MeanFieldProblem,
    lattice_bottom: RandomMeasure,
    lattice_top: RandomMeasure,
    direction: str = "from_bottom",
    max_iter: int = 50,
) -> FixedPointReport:
    """Iterate m ← Φ(m) from a lattice extreme until two iterates are equal.

    Every step is certified against the order: from the bottom the
    iterates must increase under ≤_p, from the top they must decrease.
    """
    if direction not in ("from_bottom", "from_top"):
        raise ValueError(f"未知的迭代方向：{direction}")
    measure = lattice_bottom if direction == "from_bottom" else lattice_top
    iterates = [measure]
    trace: List[float] = []
    converged = False
    for k in range(1, max_iter + 1):
        image, _, _ = problem.image(measure)
        lower, upper = (measure, image) if direction == "from_bottom" else (image, measure)
        if not random_measure_leq(lower, upper):
            raise OrderViolation(f"第 {k} 步迭代破坏了单调链（{direction}）", previous=measure, current=image)
        stationary = measures_equal(image, measure)
        trace.append(0.0 if stationary else random_measure_distance(image, measure))
        iterates.append(image)
        logger.debug("tarski %s iteration %d: gap %.3e", direction, k, trace[-1])
        if stationary:
            converged = True
            break
        measure = image
    image, lhat, _ = problem.image(measure)
    residual = 0.0 if measures_equal(image, measure) else random_measure_distance(measure, image)
    report = FixedPointReport(
        m_star=measure,
        lhat_star=lhat,
        residual_consistency=residual,
        residual_representation=_residual_representation(lhat),
        iterations=len(trace),
        trace=trace,
        converged=converged,
        engine=f"tarski:{direction}",
        iterates=iterates,
    )
    if not converged:
        report.notes.append(f"达到最大迭代次数 {max_iter} 仍未到达不动点")
        logger.warning("tarski %s stopped at max_iter=%d", direction, max_iter)
    else:
        logger.info("tarski %s stationary after %d iterations", direction, len(trace))
    return report


@dataclass
class AuditReport:
    passed: bool
    pairs_checked: int
    reason: Optional[str] = None
    witness: Optional[Tuple[RandomMeasure, RandomMeasure]] = None

    def to_dict(self) -> Dict:
        payload = {"passed": self.passed, "pairs_checked": self.pairs_checked, "reason": self.reason}
        if self.witness is not None:
            payload["witness"] = [self.witness[0].to_dict(), self.witness[1].to_dict()]
        return payload


def _audit_pair(problem: MeanFieldProblem, m1: RandomMeasure, m2: RandomMeasure) -> Optional[str]:
    out1, out2 = problem.query(m1), problem.query(m2)
    tree = problem.tree
    if np.any(out1.X.values > out2.X.values + AUDIT_TOL):
        node = int(np.argmax(out1.X.values - out2.X.values))
        return f"X 不满足单调性：节点 {node}"
    span = 1.0 + max(np.max(np.abs(out1.Y.values)), np.max(np.abs(out2.Y.values))) / tree.dt
    for level in np.linspace(-span, span, 21):
        gap = out2.f.values_at(float(level)) - out1.f.values_at(float(level))
        if np.any(gap > AUDIT_TOL):
            return f"生成元未随测度递减：ℓ={level:.6g}，节点 {int(np.argmax(gap))}"
    if not is_supermartingale(tree, out2.Y - out1.Y, tol=AUDIT_TOL):
        return "Y 的差不是上鞅"
    return None


def monotonicity_audit(
    problem: MeanFieldProblem,
    base: RandomMeasure,
    sample_pairs: int = 100,
    seed: Optional[int] = None,
    scale: float = 1.0,
) -> AuditReport:
    """Randomized check that m¹ ≤_p m² implies X¹ ≤ X², f¹ ≥ f² and Y² − Y¹ supermartingale."""
    rng = np.random.default_rng(seed)
    for i in range(sample_pairs):
        _, m1 = sample_ordered_pair(base, rng, scale)
        _, m2 = sample_ordered_pair(m1, rng, scale)
        reason = _audit_pair(problem, m1, m2)
        if reason is not None:
            logger.info("monotonicity audit failed on pair %d: %s", i, reason)
            return AuditReport(False, i + 1, reason, (m1, m2))
    return AuditReport(True, sample_pairs)


@dataclass(eq=False)
class DimensionReductionResult:
    """Per-time shifts y*_t with the shifted level table and its law."""

    shifts: np.ndarray
    residuals: np.ndarray
    table: np.ndarray
    weights: np.ndarray
    measure: RandomMeasure
    lhat: Optional[LhatResult] = None
    derivative_bound: float = 0.0

    def to_dict(self) -> Dict:
        return {
            "shifts": self.shifts.tolist(),
            "residuals": self.residuals.tolist(),
            "derivative_bound": self.derivative_bound,
            "measure": self.measure.to_dict(),
        }


def _level_table(l_base: Union[LhatResult, np.ndarray], weights: Optional[Sequence[float]]):
    if isinstance(l_base, LhatResult):
        tree = l_base.tree
        ell = l_base.ell_values()
        rows = np.array([ell[list(p.nodes[:-1])] for p in tree.paths], dtype=float)
        return rows, np.array([p.probability for p in tree.paths]), tree, ell
    rows = np.atleast_2d(np.asarray(l_base, dtype=float))
    w = np.full(rows.shape[0], 1.0 / rows.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (rows.shape[0],) or abs(w.sum() - 1.0) > 1e-12 or np.any(w < 0):
        raise ValueError("权重必须为非负且与表格行数一致、总和为 1")
    return rows, w, None, None


def derivative_bound(
    phi: Callable[[float], float],
    lo: float,
    hi: float,
    dphi: Optional[Callable[[float], float]] = None,
    samples: int = DERIVATIVE_SAMPLES,
) -> Tuple[float, float]:
    """(min, max) of φ′ sampled on a uniform grid of [lo, hi]."""
    pts = np.linspace(lo, hi, samples)
    if dphi is not None:
        slopes = np.vectorize(dphi, otypes=[float])(pts)
    else:
        h = 1e-6 * max(1.0, hi - lo)
        vphi = np.vectorize(phi, otypes=[float])
        slopes = (vphi(pts + h) - vphi(pts - h)) / (2.0 * h)
    return float(slopes.min()), float(slopes.max())


def dimension_reduction_solve(
    l_base: Union[LhatResult, np.ndarray],
    phi: Callable[[float], float],
    tol: float = 1e-10,
    dphi: Optional[Callable[[float], float]] = None,
    bracket: Optional[Tuple[float, float]] = None,
    weights: Optional[Sequence[float]] = None,
) -> DimensionReductionResult:
    """Solve y_t = E[φ(L_t + y_t)] at every time index.

    ``l_base`` is either a representation result or a table of L values
    (rows are scenarios, columns time indices). The law is unconditional.
    """
    rows, w, tree, ell = _level_table(l_base, weights)
    if not np.all(np.isfinite(rows)):
        raise AdapterError("L 表格包含非有限值")
    if rows.shape[1] > 1 and np.any(np.diff(rows, axis=1) < -TERMINAL_TOL):
        raise AdapterError("L 的路径不是单调不减的，无法进行降维")
    vphi = np.vectorize(phi, otypes=[float])
    probe = vphi(np.linspace(rows.min() - 10.0, rows.max() + 10.0, 1000))
    phi_lo, phi_hi = float(probe.min()), float(probe.max())
    d_lo, d_hi = derivative_bound(phi, rows.min() + phi_lo - 1.0, rows.max() + phi_hi + 1.0, dphi)
    if d_hi > 1.0 - DERIVATIVE_MARGIN or d_lo < -AUDIT_TOL:
        raise AdapterError(f"φ 的导数超出 [0, 1) 范围：[{d_lo:.6g}, {d_hi:.6g}]")

    steps = rows.shape[1]
    shifts = np.empty(steps)
    residuals = np.empty(steps)
    for t in range(steps):
        column = rows[:, t]

        def gap(y: float, column=column) -> float:
            return y - float(np.dot(w, vphi(column + y)))

        shifts[t] = _solve_shift(gap, bracket, scale=max(abs(phi_lo), abs(phi_hi)))
        residuals[t] = abs(gap(shifts[t]))
    if np.any(residuals > tol):
        raise AdapterError(f"标量不动点残差 {residuals.max():.3g} 超过容差 {tol:.3g}")
    if np.any(np.diff(shifts) < -AUDIT_TOL):
        raise AdapterError("标量不动点 y*_t 关于 t 不单调")
    table = rows + shifts[None, :]
    support = canonical_support([(float(wi), tuple(float(v) for v in row)) for wi, row in zip(w, table)])
    measure = RandomMeasure("vector", (AtomLaw(1.0, support),))
    lhat = None
    if tree is not None:
        shifted = np.array(ell, dtype=float, copy=True)
        inner = ~tree.is_terminal
        shifted[inner] = shifted[inner] + shifts[tree.times[inner]]
        lhat = result_from_ell(tree, shifted, "dimension_reduction")
    logger.debug("dimension reduction shifts %s", shifts)
    return DimensionReductionResult(shifts, residuals, table, w, measure, lhat, d_hi)


def _solve_shift(gap: Callable[[float], float], bracket: Optional[Tuple[float, float]], scale: float) -> float:
    if bracket is None:
        return solve_increasing(gap, scale=scale, tol=1e-14)
    lo, hi = float(min(bracket)), float(max(bracket))
    width = max(hi - lo, 1.0)
    for _ in range(200):
        if gap(lo) <= 0.0 <= gap(hi):
            break
        if gap(lo) > 0.0:
            lo -= width
        if gap(hi) < 0.0:
            hi += width
        width *= 2.0
    return float(optimize.brentq(gap, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=500))
