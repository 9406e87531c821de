"""Mean-field games of timing, singular control and consumption.

Each game is turned into a ``MeanFieldProblem``; the equilibrium is the
fixed point found by one of the engines, and a certificate records the
consistency gap and, on small trees, the exhaustive optimality gaps.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import AdapterError
from ..models import AdaptedProcess, PathRecord, RandomMeasure, ScenarioTree, StoppingTime, VPlusPath, encode_real
from .generators import Affine, GeneratorSpec, TableMonotone
from .meanfield import (
    AdapterOutput,
    FixedPointReport,
    MeanFieldProblem,
    dimension_reduction_solve,
    grid_quantizer,
    lattice_bounds,
    picard_solve,
    tarski_solve,
)
from .metrics_order import dirac_measure, random_measure_distance
from .optimizers import (
    ConsumptionSpec,
    MarginalUtility,
    SingularControlSpec,
    best_grid_control_cost,
    consumption_from_lhat,
    estimate_budget_truncation,
    satisfaction_level,
    singular_cost,
    singular_optimizer,
)
from .prob_tree import enumerate_stopping_times, normalize_terminal
from .representation import DEFAULT_LEVELS, LhatResult, lhat_after, solve_representation, stopping_objective

logger = logging.getLogger(__name__)

ENUMERATION_PATHS = 16
ENGINES = ("picard", "tarski")


@dataclass
class EngineConfig:
    """Knobs shared by the equilibrium drivers."""

    engine: str = "picard"
    tol: float = 1e-6
    max_iter: int = 100
    damping: float = 1.0
    level_count: int = DEFAULT_LEVELS
    oracle: Optional[bool] = None
    direction: str = "from_bottom"
    quantize: bool = True

    def __post_init__(self) -> None:
        if self.engine not in ENGINES:
            raise ValueError(f"未知的不动点引擎：{self.engine}")


@dataclass
class EquilibriumCertificate:
    """Consistency and optimality gaps of an equilibrium candidate."""

    consistency_gap: float
    optimality_gaps: Dict[str, float] = field(default_factory=dict)
    achieved: Dict[str, float] = field(default_factory=dict)
    best: Dict[str, float] = field(default_factory=dict)
    epsilon: float = 0.0
    tol: float = 1e-6
    converged: bool = True
    heuristic: bool = False
    notes: List[str] = field(default_factory=list)

    @property
    def max_gap(self) -> float:
        return max(self.optimality_gaps.values(), default=0.0)

    def passed(self) -> bool:
        return (
            self.converged
            and self.consistency_gap <= 2.0 * self.tol
            and self.max_gap <= self.epsilon + self.tol
        )

    def to_dict(self) -> Dict:
        return {
            "consistency_gap": encode_real(self.consistency_gap),
            "optimality_gaps": dict(self.optimality_gaps),
            "achieved": dict(self.achieved),
            "best": dict(self.best),
            "epsilon": self.epsilon,
            "tol": self.tol,
            "converged": self.converged,
            "heuristic": self.heuristic,
            "passed": self.passed(),
            "notes": list(self.notes),
        }


def _use_oracle(tree: ScenarioTree, config: EngineConfig) -> bool:
    if config.oracle is not None:
        return config.oracle
    return len(tree.paths) <= ENUMERATION_PATHS


def _run_engine(
    problem: MeanFieldProblem,
    m0: RandomMeasure,
    config: EngineConfig,
    bounds: Optional[Tuple[float, float]] = None,
) -> FixedPointReport:
    if config.engine == "picard":
        return picard_solve(problem, m0, damping=config.damping, tol=config.tol, max_iter=config.max_iter)
    lower, upper = bounds if bounds is not None else (None, None)
    bottom, top = lattice_bounds(problem, m0, lower, upper)
    return tarski_solve(problem, bottom, top, direction=config.direction, max_iter=config.max_iter)


def _certificate(report: FixedPointReport, config: EngineConfig, epsilon: float = 0.0) -> EquilibriumCertificate:
    cert = EquilibriumCertificate(
        consistency_gap=report.residual_consistency,
        epsilon=epsilon,
        tol=config.tol,
        converged=report.converged,
    )
    cert.notes.extend(report.notes)
    return cert


def interpolate_populations(g_list: Sequence[AdaptedProcess], n: int) -> GeneratorSpec:
    """Population family ℓ ↦ g_ℓ from finitely many rewards g_1..g_n.

    Piecewise-linear between integers and extended with slope 1 below 1
    and above n.
    """
    if n < 1 or len(g_list) != n:
        raise ValueError(f"种群数量 n={n} 与奖励列表长度 {len(g_list)} 不一致")
    tree = g_list[0].tree
    if n == 1:
        return Affine(AdaptedProcess(tree, g_list[0].values - 1.0), 1.0)
    rows = np.column_stack([g.values for g in g_list])
    return TableMonotone(tree, np.arange(1, n + 1, dtype=float), rows, slope=1.0)


def estimate_modulus(f: GeneratorSpec, eps: float, levels: Sequence[float]) -> float:
    """δ with |g_ℓ1 − g_ℓ2| ≤ eps whenever |ℓ1 − ℓ2| ≤ δ, from sampled slopes."""
    grid = np.linspace(min(levels) - 1.0, max(levels) + 1.0, 41)
    values = np.column_stack([f.values_at(float(level)) for level in grid])
    lip = float(np.max(np.abs(np.diff(values, axis=1)) / np.diff(grid)))
    return eps / lip if lip > 0 else math.inf


def tilted_hitting_time(lhat_path: VPlusPath, level: float, delta: float) -> float:
    """First grid time at which the step value plus δ·t reaches ``level``."""
    times = np.asarray(lhat_path.times)
    tilted = np.asarray(lhat_path.values) + delta * times[:-1]
    hits = np.flatnonzero(tilted >= level)
    return float(times[hits[0]]) if hits.size else float(times[-1])


def tilted_stopping_time(lhat: LhatResult, level: float, delta: float) -> StoppingTime:
    tree = lhat.tree
    after = lhat_after(tree, lhat.lhat.values)
    return StoppingTime(tree, after + delta * tree.grid.times()[tree.times] >= level)


@dataclass(eq=False)
class TimingGame:
    """MFG of timing: reward G(·, m) and population family ℓ ↦ g_ℓ(·, m)."""

    tree: ScenarioTree
    reward: Callable[[RandomMeasure], AdaptedProcess]
    populations: Callable[[RandomMeasure], GeneratorSpec]
    levels: Sequence[float]
    state: Optional[Callable[[RandomMeasure], AdaptedProcess]] = None
    epsilon: float = 0.0
    delta: Optional[float] = None

    def __post_init__(self) -> None:
        if self.epsilon < 0:
            raise ValueError(f"ε 必须非负：{self.epsilon}")
        if self.delta is not None and not self.delta > 0:
            raise ValueError(f"δ 必须为正：{self.delta}")
        if not self.levels:
            raise ValueError("至少需要一个查询水平")

    @classmethod
    def from_population_list(
        cls,
        tree: ScenarioTree,
        reward: Callable[[RandomMeasure], AdaptedProcess],
        g_list: Sequence[Callable[[RandomMeasure], AdaptedProcess]],
        **kwargs,
    ) -> "TimingGame":
        n = len(g_list)
        kwargs.setdefault("levels", [float(i) for i in range(1, n + 1)])
        return cls(
            tree,
            reward,
            lambda m: interpolate_populations([g(m) for g in g_list], n),
            **kwargs,
        )

    def state_at(self, measure: RandomMeasure) -> AdaptedProcess:
        return self.state(measure) if self.state is not None else AdaptedProcess.constant(self.tree, 0.0)

    def outcome_size(self) -> int:
        return (self.tree.grid.steps + 1 if self.state is not None else 0) + len(self.levels)


def timing_equilibrium(
    game: TimingGame,
    config: Optional[EngineConfig] = None,
    m0: Optional[RandomMeasure] = None,
) -> Tuple[RandomMeasure, Dict[float, StoppingTime], EquilibriumCertificate, FixedPointReport]:
    """ε-equilibrium through hitting times of the tilted running max L̂ + δ·t."""
    config = config or EngineConfig()
    tree = game.tree
    m0 = m0 or dirac_measure(tree, (0.0,) * game.outcome_size(), "vector")
    heuristic = False
    delta = 0.0
    if game.epsilon > 0:
        if game.delta is not None:
            delta = game.delta
        else:
            delta = estimate_modulus(game.populations(m0), game.epsilon / (3.0 * tree.grid.horizon), game.levels)
            heuristic = True
            logger.warning("tilt modulus estimated heuristically: delta=%.4g", delta)

    def adapter(measure: RandomMeasure) -> AdapterOutput:
        y_hat, _ = normalize_terminal(tree, game.reward(measure))
        return AdapterOutput(game.state_at(measure), y_hat, game.populations(measure))

    def psi(path: PathRecord, x: np.ndarray, lhat: VPlusPath):
        times = tuple(tilted_hitting_time(lhat, level, delta) for level in game.levels)
        head = tuple(float(v) for v in x) if game.state is not None else ()
        return head + times

    problem = MeanFieldProblem(
        tree, adapter, psi, kind="vector", level_count=config.level_count, oracle=_use_oracle(tree, config)
    )
    x0 = game.state_at(m0).values
    bounds = (min(0.0, float(x0.min())), max(tree.grid.horizon, float(x0.max())))
    report = _run_engine(problem, m0, config, bounds)
    family = {float(level): tilted_stopping_time(report.lhat_star, level, delta) for level in game.levels}
    cert = _certificate(report, config, game.epsilon)
    cert.heuristic = heuristic
    if delta:
        cert.notes.append(f"倾斜参数 δ={delta:.6g}")
    if len(tree.paths) <= ENUMERATION_PATHS:
        reward = game.reward(report.m_star).values
        family_f = game.populations(report.m_star)
        candidates = enumerate_stopping_times(tree, ENUMERATION_PATHS)
        for level, tau in family.items():
            running = family_f.values_at(level)
            achieved = stopping_objective(tree, reward, running, tau)
            best = max(stopping_objective(tree, reward, running, sigma) for sigma in candidates)
            key = repr(level)
            cert.achieved[key] = achieved
            cert.best[key] = best
            cert.optimality_gaps[key] = max(best - achieved, 0.0)
    else:
        cert.notes.append("路径数超过穷举上限，未验证最优性")
    return report.m_star, family, cert, report


@dataclass(eq=False)
class SingularGame:
    """Populations sharing (c′, k) with individual floors and caps."""

    tree: ScenarioTree
    cost_derivative: Callable[[RandomMeasure], GeneratorSpec]
    control_cost: Callable[[RandomMeasure], AdaptedProcess]
    bounds: Sequence[Tuple[float, AdaptedProcess]]
    state: Optional[Callable[[RandomMeasure], AdaptedProcess]] = None

    def spec_for(self, measure: RandomMeasure, index: int) -> SingularControlSpec:
        floor, cap = self.bounds[index]
        return SingularControlSpec(floor, cap, self.cost_derivative(measure), self.control_cost(measure))

    def outcome_size(self) -> int:
        head = self.tree.grid.steps + 1 if self.state is not None else 0
        return head + len(self.bounds) * self.tree.grid.steps


def singular_mfg_equilibrium(
    game: SingularGame,
    config: Optional[EngineConfig] = None,
    m0: Optional[RandomMeasure] = None,
    enumerate_points: int = 0,
    quantize_bounds: Optional[Tuple[float, float]] = None,
) -> Tuple[RandomMeasure, List[AdaptedProcess], EquilibriumCertificate, FixedPointReport]:
    """Equilibrium where every population plays the clamp of L̂ for (−k, c′)."""
    config = config or EngineConfig()
    tree = game.tree
    if not game.bounds:
        raise ValueError("至少需要一个种群")
    m0 = m0 or dirac_measure(tree, (0.0,) * game.outcome_size(), "vector")

    def adapter(measure: RandomMeasure) -> AdapterOutput:
        x = game.state(measure) if game.state is not None else AdaptedProcess.constant(tree, 0.0)
        return AdapterOutput(x, -game.control_cost(measure), game.cost_derivative(measure))

    def psi(path: PathRecord, x: np.ndarray, lhat: VPlusPath):
        head = tuple(float(v) for v in x) if game.state is not None else ()
        nodes = list(path.nodes[1:])
        values = np.asarray(lhat.values)
        controls = []
        for floor, cap in game.bounds:
            controls.extend(float(v) for v in np.maximum(np.minimum(values, cap.values[nodes]), floor))
        return head + tuple(controls)

    problem = MeanFieldProblem(
        tree, adapter, psi, kind="vector", level_count=config.level_count, oracle=_use_oracle(tree, config)
    )
    lo = min(floor for floor, _ in game.bounds)
    hi = max(float(cap.values.max()) for _, cap in game.bounds)
    bounds = quantize_bounds or (lo, hi)
    if config.engine == "tarski" and config.quantize:
        problem.quantizer = grid_quantizer(np.linspace(bounds[0], bounds[1], config.level_count))
    report = _run_engine(problem, m0, config, bounds)
    specs = [game.spec_for(report.m_star, i) for i in range(len(game.bounds))]
    controls = [singular_optimizer(report.lhat_star, spec) for spec in specs]
    cert = _certificate(report, config)
    for i, (spec, control) in enumerate(zip(specs, controls)):
        key = f"population_{i}"
        cert.achieved[key] = singular_cost(tree, spec, control)
        if enumerate_points:
            best = best_grid_control_cost(tree, spec, enumerate_points)
            cert.best[key] = best
            cert.optimality_gaps[key] = max(cert.achieved[key] - best, 0.0)
    return report.m_star, controls, cert, report


@dataclass(eq=False)
class ConsumptionGame:
    """Consumers with common (β, η, λ) and measure-dependent rate and marginal utility."""

    tree: ScenarioTree
    beta: float
    eta: float
    lam: float
    rate: Callable[[RandomMeasure], AdaptedProcess]
    marginal_utility: Callable[[RandomMeasure], MarginalUtility]
    eta_bar: Optional[float] = None
    phi: Optional[Callable[[float], float]] = None
    dphi: Optional[Callable[[float], float]] = None

    def __post_init__(self) -> None:
        if self.eta_bar is not None and not self.eta_bar > self.eta:
            raise ValueError(f"满意度上界 η̄={self.eta_bar} 必须大于 η={self.eta}")

    def spec_for(self, measure: Optional[RandomMeasure]) -> ConsumptionSpec:
        return ConsumptionSpec(
            self.rate(measure),
            self.beta,
            self.eta,
            self.lam,
            self.marginal_utility(measure),
            eta_bar=self.eta_bar,
        )

    def level_band(self) -> Tuple[float, float]:
        """[−1/η, −1/η̄], the range of levels that affect satisfaction."""
        upper = -1.0 / self.eta_bar if self.eta_bar is not None else -0.0
        return -1.0 / self.eta, upper


@dataclass(eq=False)
class ConsumptionEquilibrium:
    measure: RandomMeasure
    satisfaction: AdaptedProcess
    plan: AdaptedProcess
    budget: float
    certificate: EquilibriumCertificate
    report: Optional[FixedPointReport] = None
    shifts: Optional[np.ndarray] = None

    def to_dict(self) -> Dict:
        payload = {
            "measure": self.measure.to_dict(),
            "satisfaction": self.satisfaction.to_dict(),
            "consumption": self.plan.to_dict(),
            "budget": self.budget,
            "certificate": self.certificate.to_dict(),
        }
        if self.shifts is not None:
            payload["shifts"] = self.shifts.tolist()
        if self.report is not None:
            payload["trace"] = list(self.report.trace)
        return payload


def consumption_mfg_equilibrium(
    game: ConsumptionGame,
    mode: str = "general",
    config: Optional[EngineConfig] = None,
    m0: Optional[RandomMeasure] = None,
) -> ConsumptionEquilibrium:
    """Consumption equilibrium by a fixed-point engine or by dimension reduction."""
    config = config or EngineConfig()
    tree = game.tree
    steps = tree.grid.steps
    m0 = m0 or dirac_measure(tree, (0.0,) * (2 * steps), "vector")
    if mode == "dimension_reduction":
        return _consumption_by_reduction(game, config, m0)
    if mode != "general":
        raise ValueError(f"未知的求解模式：{mode}")
    discount = np.exp(-game.beta * tree.grid.times()[:-1])

    def adapter(measure: RandomMeasure) -> AdapterOutput:
        spec = game.spec_for(measure)
        y, f = spec.representation_inputs()
        return AdapterOutput(spec.rate, y, f)

    def psi(path: PathRecord, x: np.ndarray, lhat: VPlusPath):
        try:
            level = satisfaction_level(np.asarray(lhat.values), game.eta, game.eta_bar)
        except ValueError as exc:
            raise AdapterError(f"{exc}；请设置满意度上界 η̄") from exc
        satisfaction = discount * level
        return tuple(float(v) for v in x[:-1]) + tuple(float(v) for v in satisfaction)

    problem = MeanFieldProblem(
        tree, adapter, psi, kind="vector", level_count=config.level_count, oracle=_use_oracle(tree, config)
    )
    report = _run_engine(problem, m0, config)
    spec = game.spec_for(report.m_star)
    satisfaction, plan, budget = consumption_from_lhat(report.lhat_star, spec)
    cert = _certificate(report, config)
    cert.notes.append(f"截断尾部估计 {estimate_budget_truncation(spec):.6g}")
    return ConsumptionEquilibrium(report.m_star, satisfaction, plan, budget, cert, report=report)


def _consumption_by_reduction(game: ConsumptionGame, config: EngineConfig, m0: RandomMeasure) -> ConsumptionEquilibrium:
    """Scalar reduction inside an outer loop on the measure.

    Each round rebuilds (r, u′) from the previous reduced law, solves L once
    and shifts it by y*_t. The loop stops when two consecutive laws are
    within ``config.tol``; that distance is the reported consistency gap.
    """
    if game.phi is None:
        raise ValueError("降维模式需要交互函数 φ")
    tree = game.tree
    oracle = _use_oracle(tree, config)
    spec = game.spec_for(m0)
    measure: Optional[RandomMeasure] = None
    gap = math.inf
    trace: List[float] = []
    for _ in range(config.max_iter):
        used = spec
        y, f = used.representation_inputs()
        base = solve_representation(tree, y, f, oracle=oracle, count=config.level_count)
        reduced = dimension_reduction_solve(base, game.phi, tol=1e-10, dphi=game.dphi)
        if measure is not None:
            gap = random_measure_distance(reduced.measure, measure)
            trace.append(gap)
            logger.debug("reduction round %d: gap %.3e", len(trace) + 1, gap)
        measure = reduced.measure
        if gap <= config.tol:
            break
        spec = game.spec_for(measure)
    converged = gap <= config.tol
    satisfaction, plan, budget = consumption_from_lhat(reduced.lhat, used)
    cert = EquilibriumCertificate(
        consistency_gap=max(gap, float(reduced.residuals.max())),
        tol=config.tol,
        converged=converged,
    )
    cert.notes.append(f"降维外层迭代 {len(trace) + 1} 轮")
    if not converged:
        cert.notes.append(f"达到最大迭代次数 {config.max_iter} 仍未收敛")
        logger.warning("dimension reduction did not settle within %d rounds", config.max_iter)
    cert.notes.append(f"截断尾部估计 {estimate_budget_truncation(used):.6g}")
    return ConsumptionEquilibrium(measure, satisfaction, plan, budget, cert, shifts=reduced.shifts)
