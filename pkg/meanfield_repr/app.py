"""Command handlers for the meanfield_repr experiment runner."""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from . import __version__
from .errors import (
    AdapterError,
    ConfigError,
    EnumerationRefused,
    GeneratorError,
    OrderViolation,
    RepresentationError,
    TreeError,
)
from .models import AdaptedProcess, RandomMeasure, RunConfig, ScenarioTree, TimeGrid, VPlusPath
from .services import fixtures
from .services.generators import Affine, GeneratorSpec
from .services.meanfield import MeanFieldProblem, lattice_bounds, picard_solve, tarski_solve
from .services.metrics_order import (
    dirac_measure,
    levy_distance,
    levy_distance_truncated,
    measures_equal,
    random_measure_distance,
    random_measure_leq,
)
from .services.mfg_apps import (
    ConsumptionGame,
    EngineConfig,
    SingularGame,
    TimingGame,
    consumption_mfg_equilibrium,
    singular_mfg_equilibrium,
    timing_equilibrium,
)
from .services.optimizers import PowerMarginalUtility
from .services.prob_tree import chain_tree, random_tree
from .services.representation import (
    LhatResult,
    representation_tolerance,
    solve_essinf_bruteforce,
    solve_level_grid,
)
from .services.stability import (
    additive_family,
    counterexample_family,
    counterexample_i,
    counterexample_ii,
    hitting_time_convergence,
    stability_sweep,
    zero_family,
)
from .services.storage import (
    ArtifactStore,
    config_hash,
    load_generator,
    load_process,
    load_tree,
    resolve_input,
    resolve_output_dir,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_PARSE = 2
EXIT_REFUSED = 3
EXIT_NOT_CONVERGED = 4

REFUSALS = (EnumerationRefused, RepresentationError, GeneratorError, AdapterError, OrderViolation, TreeError)


class ExperimentRunner:
    """Runs one configured command and writes its artifacts."""

    def __init__(self, config: RunConfig, base_dir: Optional[Path] = None) -> None:
        self.config = config
        self.base_dir = base_dir or Path.cwd()
        self.inputs: Dict = dict(config.inputs)
        self._store: Optional[ArtifactStore] = None
        self.written: List[Path] = []
        self.handlers: Dict[str, Callable[[], int]] = {
            "represent": self.cmd_represent,
            "mfg-timing": self.cmd_mfg_timing,
            "mfg-singular": self.cmd_mfg_singular,
            "mfg-consumption": self.cmd_mfg_consumption,
            "fixed-point": self.cmd_fixed_point,
            "stability": self.cmd_stability,
            "metrics": self.cmd_metrics,
        }

    @property
    def store(self) -> ArtifactStore:
        if self._store is None:
            self._store = ArtifactStore(resolve_output_dir(self.config), __version__, config_hash(self.config))
        return self._store

    def run(self) -> int:
        try:
            self.config.validate()
            handler = self.handlers[self.config.command]
            return handler()
        except ConfigError as exc:
            logger.error("配置错误：%s", exc)
            return EXIT_PARSE
        except REFUSALS as exc:
            logger.error("求解被拒绝：%s", exc)
            return EXIT_REFUSED
        except ValueError as exc:
            logger.error("输入不满足前提条件：%s", exc)
            return EXIT_REFUSED
        except Exception as exc:  # noqa: BLE001
            logger.exception("运行失败：%s", exc)
            return EXIT_FAILED

    # ----- helpers -------------------------------------------------
    def _write_json(self, name: str, payload: Dict) -> None:
        self.written.append(self.store.write_json(name, payload))

    def _write_csv(self, name: str, header, rows) -> None:
        self.written.append(self.store.write_csv(name, header, rows))

    def _rng(self) -> np.random.Generator:
        if self.config.seed is None:
            raise ConfigError("随机实例必须指定 seed", "seed")
        return np.random.default_rng(self.config.seed)

    def _input(self, key: str) -> Optional[Dict]:
        return resolve_input(self.inputs.get(key), self.base_dir)

    def _tree(self) -> ScenarioTree:
        if "tree" in self.inputs:
            return load_tree(self._input("tree"))
        if "chain" in self.inputs:
            try:
                return chain_tree(TimeGrid.from_dict(self.inputs["chain"]))
            except (TreeError, TypeError, ValueError) as exc:
                raise ConfigError(str(exc), "inputs.chain") from exc
        if "random_tree" in self.inputs:
            spec = self.inputs["random_tree"] or {}
            return random_tree(
                self._rng(),
                int(spec.get("N", 3)),
                max_branch=int(spec.get("max_branch", 2)),
                horizon=float(spec.get("T", 1.0)),
                atom_count=int(spec.get("atoms", 1)),
            )
        raise ConfigError("缺少场景树（tree / chain / random_tree 三选一）", "inputs")

    def _process(self, tree: ScenarioTree, key: str, default: Optional[float] = None) -> AdaptedProcess:
        raw = self.inputs.get(key, default)
        if isinstance(raw, str):
            raw = self._input(key)
        return load_process(tree, raw, f"inputs.{key}")

    def _engine(self) -> EngineConfig:
        try:
            return EngineConfig(
                engine=self.inputs.get("engine", "picard"),
                tol=self.config.tol,
                max_iter=self.config.max_iter,
                damping=self.config.damping,
                level_count=self.config.level_grid,
                oracle=True if self.config.oracle else None,
                direction=self.inputs.get("direction", "from_bottom"),
                quantize=self.config.quantization,
            )
        except ValueError as exc:
            raise ConfigError(str(exc), "inputs.engine") from exc

    def _finish_equilibrium(self, name: str, payload: Dict, certificate, report) -> int:
        self._write_json(f"{name}.json", payload)
        if report is not None and self.config.format == "csv":
            self._write_csv(f"{name}_trace.csv", ["iteration", "gap"], enumerate(report.trace, start=1))
        if not certificate.converged:
            if report is not None:
                self._write_json(f"{name}_trace.json", {"trace": report.trace, "notes": report.notes})
            logger.warning("%s: fixed-point engine did not converge", name)
            return EXIT_NOT_CONVERGED
        return EXIT_OK if certificate.passed() else EXIT_FAILED

    # ----- represent -----------------------------------------------
    def cmd_represent(self) -> int:
        fixture = self.inputs.get("fixture")
        if fixture in ("counterexample_i", "counterexample_ii"):
            return self._represent_counterexample(fixture)
        if fixture == "random":
            rng = self._rng()
            tree, Y, f = fixtures.random_instance(
                rng,
                steps=int(self.inputs.get("N", 3)),
                max_branch=int(self.inputs.get("max_branch", 2)),
                generator=self.inputs.get("generator", "affine"),
            )
        elif fixture == "zero":
            tree = chain_tree(TimeGrid.from_dict(self.inputs.get("grid")))
            Y, f = AdaptedProcess.constant(tree, 0.0), Affine.identity(tree)
        elif fixture is None:
            tree = self._tree()
            Y = self._process(tree, "Y")
            f = load_generator(tree, self._input("f"), "inputs.f")
        else:
            raise ConfigError(f"未知的内置实例：{fixture}", "inputs.fixture")

        if self.config.oracle:
            result = solve_essinf_bruteforce(tree, Y, f)
            grid = solve_level_grid(tree, Y, f, count=self.config.level_grid)
            self._write_json("oracle_gap.json", self._oracle_gap(result, grid))
        else:
            result = solve_level_grid(tree, Y, f, levels=self.inputs.get("levels"), count=self.config.level_grid)
        residual = float(result.diagnostics.get("residual", 0.0))
        tolerance = max(self.config.tol, representation_tolerance(result, f))
        payload = result.to_dict()
        payload.update({"tree": tree.to_dict(), "residual": residual, "tolerance": tolerance})
        self._write_json("represent.json", payload)
        if self.config.format == "csv":
            ell = result.ell_values()
            rows = [
                (node, tree.grid.time(int(tree.times[node])), result.lhat.values[node], ell[node])
                for node in range(tree.size)
            ]
            self._write_csv("represent.csv", ["node", "t", "lhat", "ell"], rows)
        return EXIT_OK if residual <= tolerance else EXIT_FAILED

    @staticmethod
    def _oracle_gap(oracle: LhatResult, grid: LhatResult) -> Dict:
        a, b = oracle.lhat.values, grid.lhat.values
        finite = np.isfinite(a) & np.isfinite(b)
        gap = float(np.max(np.abs(a[finite] - b[finite]))) if finite.any() else 0.0
        return {"sup_gap": gap, "grid_cell": grid.grid_cell, "within_cell": gap <= grid.grid_cell + 1e-9}

    def _represent_counterexample(self, fixture: str) -> int:
        n = int(self.inputs.get("n", 2))
        steps = self.inputs.get("grid_steps")
        build = counterexample_i if fixture == "counterexample_i" else counterexample_ii
        try:
            record = build(n, None if steps is None else int(steps))
        except ValueError as exc:
            raise ConfigError(str(exc), "inputs.grid_steps") from exc
        payload = record.to_dict()
        payload["max_error"] = max(record.formula_error, record.plateau_error, record.tail_error)
        self._write_json("counterexample.json", payload)
        return EXIT_OK if payload["max_error"] <= 4.0 * record.dt else EXIT_FAILED

    # ----- mean-field games ----------------------------------------
    def cmd_mfg_timing(self) -> int:
        tree = self._tree()
        G = self._process(tree, "G", 0.0)
        raw_pops = self.inputs.get("populations")
        if not raw_pops:
            raise ConfigError("至少需要一个种群奖励过程", "inputs.populations")
        pops = [load_process(tree, raw, f"inputs.populations[{i}]") for i, raw in enumerate(raw_pops)]
        drift = float(self.inputs.get("drift", 0.0))
        shift = float(self.inputs.get("interaction", 0.0))
        remaining = tree.grid.horizon - tree.grid.times()[tree.times]

        def reward(m: RandomMeasure) -> AdaptedProcess:
            return AdaptedProcess(tree, G.values + drift * fixtures.mean_statistic(m) * remaining)

        def member(g: AdaptedProcess) -> Callable[[RandomMeasure], AdaptedProcess]:
            return lambda m: AdaptedProcess(tree, g.values - shift * fixtures.mean_statistic(m))

        kwargs = {"epsilon": float(self.inputs.get("epsilon", 0.0))}
        if self.inputs.get("delta") is not None:
            kwargs["delta"] = float(self.inputs["delta"])
        if self.inputs.get("levels") is not None:
            kwargs["levels"] = [float(v) for v in self.inputs["levels"]]
        game = TimingGame.from_population_list(tree, reward, [member(g) for g in pops], **kwargs)
        m_star, family, cert, report = timing_equilibrium(game, self._engine())
        payload = {
            "measure": m_star.to_dict(),
            "stopping_times": {repr(level): st.to_dict() for level, st in family.items()},
            "certificate": cert.to_dict(),
            "report": report.to_dict(),
        }
        return self._finish_equilibrium("mfg_timing", payload, cert, report)

    def cmd_mfg_singular(self) -> int:
        tree = self._tree()
        k = self._process(tree, "k", 0.0)
        base = load_generator(tree, self._input("c_prime") or {"kind": "affine", "a": 0.0, "b": 1.0}, "inputs.c_prime")
        if not isinstance(base, Affine):
            raise ConfigError("成本导数 c′ 目前仅支持仿射形式", "inputs.c_prime")
        shift = float(self.inputs.get("interaction", 0.0))
        raw_bounds = self.inputs.get("bounds") or [{"floor": 0.0, "cap": 1.0}]
        bounds = [
            (float(b.get("floor", 0.0)), load_process(tree, b.get("cap", 1.0), f"inputs.bounds[{i}].cap"))
            for i, b in enumerate(raw_bounds)
        ]

        def cost_derivative(m: RandomMeasure) -> GeneratorSpec:
            return Affine(AdaptedProcess(tree, base.a.values - shift * fixtures.mean_statistic(m)), base.b)

        game = SingularGame(tree, cost_derivative, lambda m: k, bounds)
        quantize = self.inputs.get("quantize_bounds")
        m_star, controls, cert, report = singular_mfg_equilibrium(
            game,
            self._engine(),
            enumerate_points=int(self.inputs.get("enumerate_points", 0)),
            quantize_bounds=None if quantize is None else (float(quantize[0]), float(quantize[1])),
        )
        payload = {
            "measure": m_star.to_dict(),
            "controls": [c.to_dict() for c in controls],
            "certificate": cert.to_dict(),
            "report": report.to_dict(),
        }
        if report.iterates:
            payload["bracketing"] = self._bracketing(game, quantize)
        return self._finish_equilibrium("mfg_singular", payload, cert, report)

    def _bracketing(self, game: SingularGame, quantize) -> Dict:
        """Tarski runs from both lattice extremes and whether they meet."""
        out = {}
        for direction in ("from_bottom", "from_top"):
            engine = self._engine()
            engine.direction = direction
            _, _, cert, report = singular_mfg_equilibrium(
                game,
                engine,
                quantize_bounds=None if quantize is None else (float(quantize[0]), float(quantize[1])),
            )
            out[direction] = {"iterations": report.iterations, "converged": report.converged, "measure": report.m_star}
        bottom, top = out["from_bottom"].pop("measure"), out["from_top"].pop("measure")
        out["coincide"] = measures_equal(bottom, top)
        return out

    def cmd_mfg_consumption(self) -> int:
        tree = self._tree()
        rate = self._process(tree, "rate", 0.0)
        gamma = float(self.inputs.get("gamma", 1.0))
        scale = float(self.inputs.get("scale", 1.0))
        shift = float(self.inputs.get("interaction", 0.0))
        mode = self.inputs.get("mode", "general")
        phi = dphi = None
        if mode == "dimension_reduction":
            phi, dphi = fixtures.tanh_interaction(float(self.inputs.get("phi_scale", 0.25)))

        def utility(m: Optional[RandomMeasure]) -> PowerMarginalUtility:
            strength = 0.0 if m is None else shift * fixtures.mean_statistic(m)
            return PowerMarginalUtility(gamma, scale * (1.0 + strength))

        try:
            game = ConsumptionGame(
                tree,
                beta=float(self.inputs.get("beta", 1.0)),
                eta=float(self.inputs.get("eta", 1.0)),
                lam=float(self.inputs.get("lam", 1.0)),
                rate=lambda m: rate,
                marginal_utility=utility,
                eta_bar=None if self.inputs.get("eta_bar") is None else float(self.inputs["eta_bar"]),
                phi=phi,
                dphi=dphi,
            )
        except ValueError as exc:
            raise ConfigError(str(exc), "inputs") from exc
        equilibrium = consumption_mfg_equilibrium(game, mode=mode, config=self._engine())
        if equilibrium.shifts is not None:
            times = tree.grid.times()[:-1]
            self._write_csv("dimension_reduction.csv", ["t", "shift"], zip(times, equilibrium.shifts))
        return self._finish_equilibrium(
            "mfg_consumption", equilibrium.to_dict(), equilibrium.certificate, equilibrium.report
        )

    def cmd_fixed_point(self) -> int:
        """Generic engine run on the built-in ordered adapter over a random tree."""
        rng = self._rng()
        tree = random_tree(rng, int(self.inputs.get("N", 2)), max_branch=int(self.inputs.get("max_branch", 2)))
        base_y = fixtures.random_payoff(rng, tree)
        base_a = AdaptedProcess(tree, rng.normal(0.0, 1.0, size=tree.size))
        adapter = fixtures.ordered_adapter(
            tree,
            base_y,
            base_a,
            drift_weight=float(self.inputs.get("drift", 0.1)),
            generator_weight=float(self.inputs.get("interaction", 0.1)),
        )
        engine = self._engine()
        problem = MeanFieldProblem(tree, adapter, kind="path", level_count=engine.level_count, oracle=bool(engine.oracle))
        probe = _zero_path_measure(tree)
        if engine.engine == "picard":
            report = picard_solve(problem, probe, damping=engine.damping, tol=engine.tol, max_iter=engine.max_iter)
        else:
            bottom, top = lattice_bounds(problem, probe)
            report = tarski_solve(problem, bottom, top, direction=engine.direction, max_iter=engine.max_iter)
        self._write_json("fixed_point.json", report.to_dict())
        if self.config.format == "csv":
            self._write_csv("fixed_point_trace.csv", ["iteration", "gap"], enumerate(report.trace, start=1))
        return EXIT_OK if report.converged else EXIT_NOT_CONVERGED

    # ----- stability -----------------------------------------------
    def cmd_stability(self) -> int:
        name = self.inputs.get("family", "counterexample_i")
        ns = [int(n) for n in self.inputs.get("ns", (2, 4, 8, 16))]
        records = []
        if name in ("counterexample_i", "counterexample_ii"):
            kind = name.rsplit("_", 1)[1]
            family = counterexample_family(kind, ns)
            build = counterexample_i if kind == "i" else counterexample_ii
            records = [build(n).to_dict() for n in ns]
        elif name in ("additive", "zero"):
            rng = self._rng()
            tree, Y, f = fixtures.random_instance(rng, steps=int(self.inputs.get("N", 3)))
            if name == "zero":
                family = zero_family(tree, Y, f, ns)
            else:
                family = additive_family(tree, Y, f, fixtures.random_payoff(rng, tree), ns)
        else:
            raise ConfigError(f"未知的扰动族：{name}", "inputs.family")
        sweep = stability_sweep(family, epsilon=self.config.epsilon, seed=self.config.seed)
        self._write_csv(
            "stability.csv",
            ["n", "e_n", "mean_levy", "p_exceed", "d_lp"],
            [(r.n, r.e_n, r.mean_levy, r.p_exceed, r.d_lp) for r in sweep.rows],
        )
        payload = {"family": name, "sweep": sweep.to_dict(), "counterexamples": records}
        if self.inputs.get("level") is not None:
            payload["hitting"] = hitting_time_convergence(
                family, float(self.inputs["level"]), epsilon=self.config.epsilon
            ).to_dict()
        self._write_json("stability.json", payload)
        return EXIT_OK

    # ----- metrics -------------------------------------------------
    def cmd_metrics(self) -> int:
        payload: Dict = {}
        paths = self.inputs.get("paths")
        measures = self.inputs.get("measures")
        if not paths and not measures:
            raise ConfigError("需要提供 paths 或 measures", "inputs")
        try:
            if paths:
                if len(paths) != 2:
                    raise ConfigError("paths 必须恰好包含两条路径", "inputs.paths")
                v1, v2 = (VPlusPath.from_dict(resolve_input(p, self.base_dir)) for p in paths)
                value, tail = levy_distance_truncated(v1, v2, self.config.truncation_terms)
                payload["levy"] = levy_distance(v1, v2)
                payload["levy_truncated"] = {"value": value, "tail_bound": tail}
            if measures:
                if len(measures) != 2:
                    raise ConfigError("measures 必须恰好包含两个测度", "inputs.measures")
                m1, m2 = (RandomMeasure.from_dict(resolve_input(m, self.base_dir)) for m in measures)
                payload["levy_prokhorov"] = random_measure_distance(m1, m2)
                payload["order"] = {"m1_leq_m2": random_measure_leq(m1, m2), "m2_leq_m1": random_measure_leq(m2, m1)}
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"度量输入格式错误：{exc}", "inputs") from exc
        self._write_json("metrics.json", payload)
        return EXIT_OK


def _zero_path_measure(tree: ScenarioTree) -> RandomMeasure:
    """Point mass at the all-zero running-max path on every common-noise atom."""
    path = VPlusPath(tuple(tree.grid.times()), (0.0,) * tree.grid.steps)
    return dirac_measure(tree, path, "path")
