"""Run configuration: one YAML or JSON file, validated with field paths in errors."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .criteria import CRITERIA
from .errors import ConfigError
from .harness import AXES, Protocol
from .scoring.base import EPSILON, MODES, SEQUENCE_MODE

BACKEND_KINDS = ("synthetic", "http", "replay")
STORE_MODES = ("record", "replay")

PROTOCOL_DEFAULTS: dict[str, Any] = {
    "n": 5,
    "k": None,
    "permutation_budget": 120,
    "mode": SEQUENCE_MODE,
    "criteria": ["cv", "mdl"],
    "alphas": [1.0, 2.0, 3.0],
    "beta": 1.0,
    "first_fold_uniform": False,
    "epsilon": EPSILON,
    "class_coverage": False,
    "passes": None,
}

BACKEND_DEFAULTS: dict[str, Any] = {
    "kind": "synthetic",
    "name": None,
    "endpoint": None,
    "model": None,
    "api_key_env": "FEWSHOT_API_KEY",
    "concurrency": 1,
    "budget": None,
    "max_retries": 5,
    "timeout": 60.0,
    "offset_unit": "char",
    "length_normalize": False,
    "store": None,
    "store_mode": "record",
    "synthetic": None,
}

SYNTHETIC_KEYS = ("qualities", "noise", "order_weight", "label_count", "input_nll", "seed", "num_examples")


@dataclass
class RunConfig:
    raw: dict
    base_dir: Path
    task: dict = field(default_factory=dict)
    backends: list[dict] = field(default_factory=list)
    protocol: Protocol = field(default_factory=Protocol)
    seeds: list[int] = field(default_factory=list)
    sweep: dict | None = None
    out: Path = Path("out")

    @property
    def task_name(self) -> str:
        return self.task["name"]

    def effective(self) -> dict:
        """The config with defaults filled, re-loadable as-is."""
        return copy.deepcopy(self.raw)

    def dump(self) -> str:
        return yaml.safe_dump(self.effective(), sort_keys=True)


def _fail(path: str, message: str) -> ConfigError:
    return ConfigError(f"{path}: {message}")


def _section(raw: dict, key: str, required: bool = False) -> dict:
    value = raw.get(key)
    if value is None:
        if required:
            raise _fail(key, "missing section")
        return {}
    if not isinstance(value, dict):
        raise _fail(key, "must be a mapping")
    return value


def _check_keys(section: dict, allowed, path: str) -> None:
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise _fail(f"{path}.{unknown[0]}", "unknown key")


def _int(value: Any, path: str, minimum: int | None = None, allow_none: bool = False) -> int | None:
    if value is None and allow_none:
        return None
    if isinstance(value, bool) or not isinstance(value, int):
        raise _fail(path, f"expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise _fail(path, f"must be >= {minimum}")
    return value


def _float(value: Any, path: str, minimum: float | None = None) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise _fail(path, f"expected a number, got {value!r}")
    if minimum is not None and value < minimum:
        raise _fail(path, f"must be >= {minimum}")
    return float(value)


def _bool(value: Any, path: str) -> bool:
    if not isinstance(value, bool):
        raise _fail(path, f"expected true/false, got {value!r}")
    return value


def _path(value: Any, path: str, base: Path, must_exist: bool = True) -> str:
    if not isinstance(value, str) or not value:
        raise _fail(path, "expected a file path")
    p = Path(value)
    full = (p if p.is_absolute() else base / p).resolve()
    if must_exist and not full.exists():
        raise _fail(path, f"file not found: {full}")
    return str(full)


def _protocol(section: dict) -> tuple[dict, Protocol]:
    _check_keys(section, PROTOCOL_DEFAULTS, "protocol")
    filled = {**PROTOCOL_DEFAULTS, **section}
    n = _int(filled["n"], "protocol.n", 2)
    k = _int(filled["k"], "protocol.k", 2, allow_none=True)
    if k is not None and k > n:
        raise _fail("protocol.k", "cannot exceed protocol.n")
    budget = _int(filled["permutation_budget"], "protocol.permutation_budget", 1)
    if filled["mode"] not in MODES:
        raise _fail("protocol.mode", f"expected one of {list(MODES)}")
    criteria = filled["criteria"]
    if isinstance(criteria, str):
        criteria = [criteria]
    if not isinstance(criteria, list) or not criteria:
        raise _fail("protocol.criteria", "expected a non-empty list")
    for i, c in enumerate(criteria):
        if c not in CRITERIA:
            raise _fail(f"protocol.criteria[{i}]", f"unknown criterion {c!r}; expected one of {list(CRITERIA)}")
    alphas = filled["alphas"]
    if not isinstance(alphas, list):
        raise _fail("protocol.alphas", "expected a list")
    alphas = [_float(a, f"protocol.alphas[{i}]", 0.0) for i, a in enumerate(alphas)]
    if "cv_alpha" in criteria and not alphas:
        raise _fail("protocol.alphas", "cv_alpha needs at least one alpha")
    beta = _float(filled["beta"], "protocol.beta", 0.0)
    eps = _float(filled["epsilon"], "protocol.epsilon", 0.0)
    if not eps < 0.5:
        raise _fail("protocol.epsilon", "must be < 0.5")
    joint = {"cv_joint", "mdl_joint"} & set(criteria)
    if joint and filled["mode"] != SEQUENCE_MODE:
        raise _fail("protocol.criteria", f"{sorted(joint)[0]} needs sequence mode")
    passes = _int(filled["passes"], "protocol.passes", 1, allow_none=True)
    filled.update(criteria=list(criteria), alphas=alphas, beta=beta, epsilon=eps)
    protocol = Protocol(
        n=n,
        k=k,
        permutation_budget=budget,
        mode=filled["mode"],
        criteria=tuple(criteria),
        alphas=tuple(alphas),
        beta=beta,
        first_fold_uniform=_bool(filled["first_fold_uniform"], "protocol.first_fold_uniform"),
        epsilon=eps,
        class_coverage=_bool(filled["class_coverage"], "protocol.class_coverage"),
        passes=passes,
    )
    return filled, protocol


def _backend(section: dict, path: str, base: Path) -> dict:
    _check_keys(section, BACKEND_DEFAULTS, path)
    b = {**BACKEND_DEFAULTS, **section}
    if b["kind"] not in BACKEND_KINDS:
        raise _fail(f"{path}.kind", f"expected one of {list(BACKEND_KINDS)}")
    _int(b["concurrency"], f"{path}.concurrency", 1)
    _int(b["budget"], f"{path}.budget", 0, allow_none=True)
    _int(b["max_retries"], f"{path}.max_retries", 0)
    if b["store_mode"] not in STORE_MODES:
        raise _fail(f"{path}.store_mode", f"expected one of {list(STORE_MODES)}")
    if b["offset_unit"] not in ("char", "byte"):
        raise _fail(f"{path}.offset_unit", "expected 'char' or 'byte'")
    if b["kind"] == "http":
        for key in ("endpoint", "model"):
            if not isinstance(b[key], str) or not b[key]:
                raise _fail(f"{path}.{key}", "required for http backends")
    if b["kind"] == "replay" and b["store"] is None:
        raise _fail(f"{path}.store", "required for replay backends")
    if b["store"] is not None:
        must_exist = b["kind"] == "replay" or b["store_mode"] == "replay"
        b["store"] = _path(b["store"], f"{path}.store", base, must_exist=must_exist)
    if b["kind"] == "synthetic":
        syn = b["synthetic"]
        if not isinstance(syn, dict):
            raise _fail(f"{path}.synthetic", "required mapping for synthetic backends")
        _check_keys(syn, SYNTHETIC_KEYS, f"{path}.synthetic")
        if not isinstance(syn.get("qualities"), list) or not syn["qualities"]:
            raise _fail(f"{path}.synthetic.qualities", "expected a non-empty list")
        for i, q in enumerate(syn["qualities"]):
            _float(q, f"{path}.synthetic.qualities[{i}]", 0.0)
    if b["name"] is None:
        b["name"] = b["model"] or (f"synthetic-{(b['synthetic'] or {}).get('seed', 0)}" if b["kind"] == "synthetic" else b["kind"])
    return b


def parse_config(raw: Any, base_dir: str | Path = ".") -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a mapping")
    base = Path(base_dir)
    _check_keys(raw, ("task", "backend", "backends", "protocol", "study", "out"), "config")
    raw = copy.deepcopy(raw)

    task = _section(raw, "task", required=True)
    _check_keys(task, ("name", "dataset", "labels", "candidates"), "task")
    if not isinstance(task.get("name"), str) or not task["name"]:
        raise _fail("task.name", "required")
    for key in ("dataset", "labels", "candidates"):
        if task.get(key) is not None:
            task[key] = _path(task[key], f"task.{key}", base)

    if "backends" in raw and "backend" in raw:
        raise _fail("backends", "give either backend or backends, not both")
    if "backends" in raw:
        if not isinstance(raw["backends"], list) or not raw["backends"]:
            raise _fail("backends", "expected a non-empty list")
        backends = []
        for i, b in enumerate(raw["backends"]):
            if not isinstance(b, dict):
                raise _fail(f"backends[{i}]", "must be a mapping")
            backends.append(_backend(b, f"backends[{i}]", base))
        names = [b["name"] for b in backends]
        if len(set(names)) != len(names):
            raise _fail("backends", "backend names must be unique")
        raw["backends"] = backends
    else:
        backends = [_backend(_section(raw, "backend", required=True), "backend", base)]
        raw["backend"] = backends[0]

    if task.get("dataset") is None and backends[0]["kind"] != "synthetic":
        raise _fail("task.dataset", "required unless the backend is synthetic")
    if task.get("dataset") is not None and task.get("candidates") is None:
        raise _fail("task.candidates", "required when a dataset file is given")

    filled, protocol = _protocol(_section(raw, "protocol"))
    raw["protocol"] = filled

    study = _section(raw, "study")
    _check_keys(study, ("seeds", "sweep"), "study")
    seeds = study.get("seeds", [0, 1, 2, 3, 4])
    if not isinstance(seeds, list) or not seeds:
        raise _fail("study.seeds", "expected a non-empty list")
    seeds = [_int(s, f"study.seeds[{i}]") for i, s in enumerate(seeds)]
    if len(set(seeds)) != len(seeds):
        raise _fail("study.seeds", "seeds must be distinct")
    sweep = study.get("sweep")
    if sweep is not None:
        if not isinstance(sweep, dict):
            raise _fail("study.sweep", "must be a mapping")
        _check_keys(sweep, ("axis", "values"), "study.sweep")
        if sweep.get("axis") not in AXES:
            raise _fail("study.sweep.axis", f"expected one of {list(AXES)}")
        if not isinstance(sweep.get("values"), list) or not sweep["values"]:
            raise _fail("study.sweep.values", "expected a non-empty list")
        for i, v in enumerate(sweep["values"]):
            if sweep["axis"] == "alpha":
                _float(v, f"study.sweep.values[{i}]", 0.0)
            else:
                _int(v, f"study.sweep.values[{i}]", 1 if sweep["axis"] == "passes" else 2)
    raw["study"] = {"seeds": seeds, "sweep": sweep}

    out = raw.get("out", "out")
    if not isinstance(out, str):
        raise _fail("out", "expected a directory path")
    out_path = (Path(out) if Path(out).is_absolute() else base / out).resolve()
    raw["out"] = str(out_path)
    raw["task"] = task

    return RunConfig(raw, base, task, backends, protocol, seeds, sweep, out_path)


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"config: cannot read {p}: {exc}") from exc
    try:
        raw = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"config: cannot parse {p}: {exc}") from exc
    return parse_config(raw, p.parent)


def apply_overrides(
    config: RunConfig,
    *,
    seed: int | None = None,
    budget: int | None = None,
    replay: str | None = None,
    record: str | None = None,
    out: str | None = None,
) -> RunConfig:
    """Re-validate with CLI scalar overrides folded into the raw config."""
    raw = copy.deepcopy(config.raw)
    if seed is not None:
        raw["study"]["seeds"] = [seed]
    sections = raw["backends"] if "backends" in raw else [raw["backend"]]
    if len(sections) > 1 and (replay or record):
        raise ConfigError("backends: --replay/--record apply to single-backend configs; set store per backend")
    for b in sections:
        if budget is not None:
            b["budget"] = budget
        if replay is not None:
            b["store"] = str(Path(replay).resolve())
            b["store_mode"] = "replay"
        if record is not None:
            b["store"] = str(Path(record).resolve())
            b["store_mode"] = "record"
    if out is not None:
        raw["out"] = str(Path(out).resolve())
    return parse_config(raw, config.base_dir)
