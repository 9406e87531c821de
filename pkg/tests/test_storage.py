from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import pytest

from meanfield_repr.errors import ConfigError
from meanfield_repr.models import RunConfig
from meanfield_repr.services.generators import Affine
from meanfield_repr.services.storage import (
    OUTPUT_ENV,
    ArtifactStore,
    canonical_json,
    config_hash,
    load_config,
    load_generator,
    load_process,
    load_tree,
    read_json,
    resolve_input,
    resolve_output_dir,
    sanitize,
)


def test_sanitize_handles_numpy_and_non_finite_values():
    raw = {"a": np.float64(1.5), "b": np.array([1, 2]), "c": math.inf, "d": -math.inf, "e": math.nan, 3: np.bool_(True)}
    assert sanitize(raw) == {"a": 1.5, "b": [1, 2], "c": "inf", "d": "-inf", "e": "nan", "3": True}
    assert json.loads(canonical_json({"x": math.inf})) == {"x": "inf"}


def test_config_hash_ignores_output_dir():
    first = RunConfig(command="stability", output_dir=Path("a"))
    second = RunConfig(command="stability", output_dir=Path("b"))
    assert config_hash(first) == config_hash(second)
    assert config_hash(first) != config_hash(RunConfig(command="stability", tol=1e-3))


def test_output_dir_env_override(monkeypatch, tmp_path):
    config = RunConfig(output_dir=tmp_path / "configured")
    monkeypatch.delenv(OUTPUT_ENV, raising=False)
    assert resolve_output_dir(config) == tmp_path / "configured"
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
    assert resolve_output_dir(config) == tmp_path / "env"


def test_artifact_store_stamps_outputs(tmp_path):
    store = ArtifactStore(tmp_path / "out", "0.1.0", "abc")
    path = store.write_json("r.json", {"value": np.float64(2.0)})
    body = json.loads(path.read_text(encoding="utf-8"))
    assert body == {"value": 2.0, "tool_version": "0.1.0", "config_hash": "abc"}

    csv_path = store.write_csv("r.csv", ["n", "e"], [(1, math.inf), (2, 0.5)])
    lines = csv_path.read_text(encoding="utf-8").splitlines()
    assert lines[:3] == ["# tool_version=0.1.0", "# config_hash=abc", "n,e"]
    assert lines[3:] == ["1,inf", "2,0.5"]
    assert not list((tmp_path / "out").glob("*.tmp"))


def test_read_json_errors(tmp_path):
    with pytest.raises(ConfigError, match="文件不存在"):
        read_json(tmp_path / "missing.json")

    broken = tmp_path / "broken.json"
    broken.write_text('{\n  "a": ,\n}', encoding="utf-8")
    with pytest.raises(ConfigError) as info:
        read_json(broken)
    assert info.value.location.endswith(":2:8")

    listing = tmp_path / "list.json"
    listing.write_text("[1, 2]", encoding="utf-8")
    with pytest.raises(ConfigError, match="顶层"):
        read_json(listing)


def test_load_config_validates(tmp_path):
    good = tmp_path / "good.json"
    good.write_text(json.dumps({"command": "metrics", "tol": 1e-4}), encoding="utf-8")
    config = load_config(good)
    assert config.command == "metrics"
    assert config.tol == pytest.approx(1e-4)

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"command": "metrics", "damping": 2.0}), encoding="utf-8")
    with pytest.raises(ConfigError) as info:
        load_config(bad)
    assert str(bad) in str(info.value)


def test_resolve_input(tmp_path):
    assert resolve_input({"kind": "affine"}) == {"kind": "affine"}
    assert resolve_input(None) is None
    (tmp_path / "f.json").write_text(json.dumps({"kind": "affine", "b": 2.0}), encoding="utf-8")
    assert resolve_input("f.json", tmp_path) == {"kind": "affine", "b": 2.0}


def test_load_process(chain3):
    assert load_process(chain3, 1.5, "Y").values.tolist() == [1.5] * 4
    proc = load_process(chain3, {"0": 2, "1": 1.5, "2": 0.5, "3": 0}, "Y")
    assert proc.values.tolist() == [2.0, 1.5, 0.5, 0.0]
    with pytest.raises(ConfigError, match="缺少"):
        load_process(chain3, None, "Y")
    with pytest.raises(ConfigError) as info:
        load_process(chain3, {"0": 1.0}, "inputs.Y")
    assert info.value.location == "inputs.Y"


def test_load_generator(chain3):
    f = load_generator(chain3, {"kind": "affine", "a": 0.5, "b": 2.0})
    assert isinstance(f, Affine)
    assert f.value(1, 1.0) == pytest.approx(2.5)
    with pytest.raises(ConfigError):
        load_generator(chain3, None)
    with pytest.raises(ConfigError):
        load_generator(chain3, {"kind": "spline"})


def test_load_tree_round_trips_and_wraps_errors(binary2):
    tree = load_tree(binary2.to_dict())
    assert tree.size == binary2.size
    with pytest.raises(ConfigError):
        load_tree({"grid": {"T": 1.0, "N": 1}})
