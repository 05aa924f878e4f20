"""Experiment configuration: a JSON document with task / model / train / qat
sections, strict key checking, dotted-path overrides, and a stable digest
stored alongside every output."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field, fields

from .data import TaskSpec
from .model import ModelConfig
from .qat import ConfigurationError, QatConfig
from .train import TrainConfig, config_digest


@dataclass
class ExperimentConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    qat: QatConfig = field(default_factory=QatConfig)
    sweep_seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    sweep_grid: list = field(default_factory=list)  # list of qat-section dicts
    output_dir: str = "out"
    max_eval: int = 500

    def grid(self) -> list:
        """(QatConfig, seeds) cells for `sweep`; falls back to the single
        qat section when no grid is given."""
        if not self.sweep_grid:
            return [(self.qat, list(self.sweep_seeds))]
        cells = []
        for entry in self.sweep_grid:
            entry = dict(entry)
            seeds = entry.pop("seeds", list(self.sweep_seeds))
            cells.append((_build(QatConfig, entry, "sweep_grid"), list(seeds)))
        return cells

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["qat"]["p"] = _json_num(d["qat"]["p"])
        for entry in d.get("sweep_grid", []):
            if "p" in entry:
                entry["p"] = _json_num(entry["p"])
        return d

    def digest(self) -> str:
        return config_digest(self.to_dict())


def _json_num(x):
    if isinstance(x, float) and math.isinf(x):
        return "inf"
    return x


def _coerce(value, typ):
    if value == "inf" and typ in (float, "float | None"):
        return math.inf
    return value


def _build(cls, section: dict, name: str):
    allowed = {f.name: f for f in fields(cls)}
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigurationError(f"unknown keys in {name!r} section: {sorted(unknown)}")
    kwargs = {}
    for key, value in section.items():
        if key == "p" and value == "inf":
            value = math.inf
        kwargs[key] = value
    return cls(**kwargs)


_SECTIONS = {"task": TaskSpec, "model": ModelConfig, "train": TrainConfig,
             "qat": QatConfig}
_SCALARS = {"output_dir": str, "max_eval": int}
_LISTS = {"sweep_seeds", "sweep_grid"}


def build_config(doc: dict) -> ExperimentConfig:
    unknown = set(doc) - set(_SECTIONS) - set(_SCALARS) - _LISTS
    if unknown:
        raise ConfigurationError(f"unknown top-level keys: {sorted(unknown)}")
    kwargs = {}
    for key, cls in _SECTIONS.items():
        if key in doc:
            if not isinstance(doc[key], dict):
                raise ConfigurationError(f"section {key!r} must be a mapping")
            kwargs[key] = _build(cls, doc[key], key)
    for key, typ in _SCALARS.items():
        if key in doc:
            kwargs[key] = typ(doc[key])
    for key in _LISTS:
        if key in doc:
            if not isinstance(doc[key], list):
                raise ConfigurationError(f"{key!r} must be a list")
            kwargs[key] = doc[key]
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    with open(path) as f:
        return build_config(json.load(f))


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw  # bare string


def apply_overrides(doc: dict, overrides: list) -> dict:
    """Apply `key.path=value` overrides left-to-right; last writer wins."""
    doc = json.loads(json.dumps(doc))  # deep copy
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not key=value")
        path, raw = item.split("=", 1)
        keys = path.split(".")
        node = doc
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"override path {path!r} crosses a non-mapping")
        node[keys[-1]] = _parse_value(raw)
    return doc


def resolve(config_path, overrides) -> ExperimentConfig:
    doc = {}
    if config_path:
        with open(config_path) as f:
            doc = json.load(f)
    doc = apply_overrides(doc, overrides or [])
    return build_config(doc)
