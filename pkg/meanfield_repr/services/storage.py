"""Artifact persistence and input loading."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Sequence, Union

import numpy as np

from ..errors import ConfigError, TreeError
from ..models import AdaptedProcess, RunConfig, ScenarioTree
from .generators import GeneratorSpec, generator_from_dict

logger = logging.getLogger(__name__)

OUTPUT_ENV = "MEANFIELD_REPR_OUT"
DEFAULT_OUTPUT_DIR = Path("results")


def sanitize(value: Any) -> Any:
    """JSON-safe copy: numpy scalars/arrays unwrapped, non-finite floats as strings."""
    if isinstance(value, dict):
        return {str(k): sanitize(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [sanitize(v) for v in value]
    if isinstance(value, np.ndarray):
        return sanitize(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    if isinstance(value, Path):
        return str(value)
    return value


def canonical_json(payload: Any) -> str:
    return json.dumps(sanitize(payload), ensure_ascii=False, indent=2, sort_keys=True, allow_nan=False)


def config_hash(config: RunConfig) -> str:
    """SHA-256 of the canonical config dump; the output location is not part of it."""
    raw = config.to_dict()
    raw.pop("output_dir", None)
    return hashlib.sha256(canonical_json(raw).encode("utf-8")).hexdigest()


def resolve_output_dir(config: RunConfig) -> Path:
    override = os.environ.get(OUTPUT_ENV)
    if override:
        return Path(override)
    return config.output_dir or DEFAULT_OUTPUT_DIR


class ArtifactStore:
    """Writes result files atomically, each stamped with version and config hash."""

    def __init__(self, root: Path, tool_version: str, config_digest: str) -> None:
        self.root = Path(root)
        self.tool_version = tool_version
        self.config_digest = config_digest
        self.root.mkdir(parents=True, exist_ok=True)

    @property
    def stamp(self) -> Dict[str, str]:
        return {"tool_version": self.tool_version, "config_hash": self.config_digest}

    def write_json(self, name: str, payload: Dict) -> Path:
        body = dict(payload)
        body.update(self.stamp)
        return self._write_text(self.root / name, canonical_json(body) + "\n")

    def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        buffer = io.StringIO()
        buffer.write(f"# tool_version={self.tool_version}\n# config_hash={self.config_digest}\n")
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([sanitize(v) for v in row])
        return self._write_text(self.root / name, buffer.getvalue())

    def _write_text(self, path: Path, text: str) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as handle:
                handle.write(text)
            os.replace(tmp, path)
        except Exception:
            Path(tmp).unlink(missing_ok=True)
            raise
        logger.info("wrote %s", path)
        return path


def read_json(path: Union[str, Path]) -> Dict:
    """Parse a JSON file; errors carry the file, line and column."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"文件不存在：{path}", str(path))
    try:
        with path.open("r", encoding="utf-8") as handle:
            payload = json.load(handle)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"JSON 解析失败：{exc.msg}", f"{path}:{exc.lineno}:{exc.colno}") from exc
    if not isinstance(payload, dict):
        raise ConfigError("顶层必须是 JSON 对象", str(path))
    return payload


def load_config(path: Union[str, Path]) -> RunConfig:
    raw = read_json(path)
    try:
        return RunConfig.from_dict(raw).validate()
    except ConfigError as exc:
        if exc.location and str(path) in exc.location:
            raise
        raise ConfigError(str(exc), str(path)) from exc


def resolve_input(value: Union[str, Dict, None], base_dir: Optional[Path] = None) -> Optional[Dict]:
    """Inline dicts pass through; strings are JSON paths relative to ``base_dir``."""
    if value is None or isinstance(value, dict):
        return value
    path = Path(value)
    if not path.is_absolute() and base_dir is not None:
        path = base_dir / path
    return read_json(path)


def load_tree(source: Union[str, Path, Dict]) -> ScenarioTree:
    raw = source if isinstance(source, dict) else read_json(source)
    try:
        return ScenarioTree.from_dict(raw)
    except TreeError as exc:
        raise ConfigError(str(exc), "tree") from exc


def load_process(tree: ScenarioTree, raw: Union[Dict, float, int, None], key: str) -> AdaptedProcess:
    """``{node_id: value}``, or a number for a constant process."""
    if raw is None:
        raise ConfigError("缺少过程数据", key)
    if isinstance(raw, (int, float)):
        return AdaptedProcess.constant(tree, float(raw))
    try:
        return AdaptedProcess.from_dict(tree, raw)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"过程数据格式错误：{exc}", key) from exc


def load_generator(tree: ScenarioTree, raw: Optional[Dict], key: str = "f") -> GeneratorSpec:
    if raw is None:
        raise ConfigError("缺少生成元配置", key)
    try:
        return generator_from_dict(tree, raw)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"生成元配置错误：{exc}", key) from exc
