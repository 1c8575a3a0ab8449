"""Typed configuration with strict YAML loading and dotted command-line overrides."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .backbone import BackboneConfig
from .data import AugmentConfig, ConfigurationError, SyntheticSpec
from .model import ModelConfig

OUTPUT_ROOT_ENV = "CAUSALFSFG_OUTPUT"
COMMANDS = ("train", "eval", "ablate", "oracle", "inspect")


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # or "folder"
    path: str | None = None
    image_size: int = 32
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    split: tuple[int, int, int] = (24, 0, 8)
    split_seed: int = 0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    episodes_per_epoch: int = 100
    n_train: int = 5
    k_train: int = 1
    u_train: int = 15
    n_test: int = 5
    k_test: int = 1
    u_test: int = 15
    eval_episodes: int = 600
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 3e-4
    decay_epoch: int = 25  # halfway, as in the 800/400 protocol
    decay_factor: float = 20.0
    val_every: int = 5
    val_episodes: int = 200
    seed: int = 0
    dtype: str = "float32"
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self):
        positive = ("epochs", "episodes_per_epoch", "n_train", "k_train", "u_train", "n_test",
                    "k_test", "u_test", "eval_episodes", "decay_epoch", "val_every")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigurationError(f"train.{name} must be positive")
        if self.lr <= 0 or self.decay_factor <= 0:
            raise ConfigurationError("train.lr and train.decay_factor must be positive")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigurationError("train.momentum must lie in [0, 1), weight_decay >= 0")
        if self.decay_epoch > self.epochs:
            raise ConfigurationError("train.decay_epoch must not exceed train.epochs")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"train.dtype {self.dtype!r} not in float32/float64")
        self.model.validate()


@dataclass(frozen=True)
class RunConfig:
    command: str = "train"
    output_dir: str = "runs/default"
    checkpoint: str | None = None
    scm: str | None = None
    report_formats: tuple[str, ...] = ("csv", "json")
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self):
        if self.command not in COMMANDS:
            raise ConfigurationError(f"command must be one of {COMMANDS}, got {self.command!r}")
        bad = set(self.report_formats) - {"csv", "tsv", "json"}
        if bad:
            raise ConfigurationError(f"report_formats: unknown {sorted(bad)}")
        if self.data.source not in ("synthetic", "folder"):
            raise ConfigurationError(f"data.source must be synthetic or folder")
        if self.data.source == "folder" and not self.data.path:
            raise ConfigurationError("data.path is required for folder datasets")
        if self.command in ("eval", "inspect") and self.checkpoint and not Path(self.checkpoint).exists():
            raise ConfigurationError(f"checkpoint: {self.checkpoint} does not exist")
        self.train.validate()


# ---------------------------------------------------------------------------
# dict <-> dataclass


def _coerce(tp, value, path):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(a, value, path)
            except ConfigurationError:
                pass
        raise ConfigurationError(f"{path}: {value!r} does not match {tp}")
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigurationError(f"{path}: expected a mapping, got {type(value).__name__}")
        return from_dict(tp, value, path)
    if origin is tuple:
        args = typing.get_args(tp)
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{path}: expected a list, got {type(value).__name__}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigurationError(f"{path}: expected {len(args)} items, got {len(value)}")
        return tuple(_coerce(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{path}: expected bool, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{path}: expected int, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{path}: expected float, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{path}: expected str, got {value!r}")
        return value
    raise ConfigurationError(f"{path}: unsupported type {tp}")


def from_dict(cls, data: dict, path: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigurationError(f"unknown key {where}{sorted(unknown)[0]}")
    kwargs = {k: _coerce(hints[k], v, f"{path}.{k}" if path else k) for k, v in data.items()}
    return cls(**kwargs)


def to_dict(obj) -> dict:
    def conv(v):
        if dataclasses.is_dataclass(v):
            return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, tuple):
            return [conv(x) for x in v]
        return v
    return conv(obj)


def fingerprint(obj) -> str:
    blob = json.dumps(to_dict(obj), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def apply_override(tree: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigurationError(f"override {assignment!r} is not key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = tree
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigurationError(f"override {key}: {p} is not a section")
    node[parts[-1]] = yaml.safe_load(raw)


def parse_config(path=None, overrides=(), command: str | None = None, echo: bool = True) -> RunConfig:
    """Load a YAML file (optional), apply ``a.b=value`` overrides, validate, echo."""
    tree = {}
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text())
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigurationError(f"{path}: top level must be a mapping")
        tree = loaded or {}
    for o in overrides:
        apply_override(tree, o)
    if command is not None:
        tree["command"] = command
    env_root = os.environ.get(OUTPUT_ROOT_ENV)
    if env_root and "output_dir" in tree and not Path(tree["output_dir"]).is_absolute():
        tree["output_dir"] = str(Path(env_root) / tree["output_dir"])
    elif env_root and "output_dir" not in tree:
        tree["output_dir"] = str(Path(env_root) / "default")
    cfg = from_dict(RunConfig, tree)
    cfg.validate()
    if echo:
        write_config(cfg, Path(cfg.output_dir) / "config.resolved.yaml")
    return cfg


def write_config(cfg, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(to_dict(cfg), sort_keys=False))


def load_train_config(path) -> TrainConfig:
    return from_dict(TrainConfig, yaml.safe_load(Path(path).read_text()) or {})


__all__ = [
    "BackboneConfig", "DataConfig", "ModelConfig", "RunConfig", "TrainConfig", "apply_override",
    "fingerprint", "from_dict", "parse_config", "to_dict", "write_config",
]
