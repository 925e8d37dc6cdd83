"""Strict JSON experiment configuration.

Every dataclass in the tree is parsed field by field: unknown keys, missing
nested objects of the wrong type and ill-typed scalars are rejected with the
dotted path of the offending field. ``dump_config`` writes every field, so
``parse -> dump -> parse`` is the identity.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import CLASSIFY, TRANSDUCTION_KINDS, TaskData, gen_classification, gen_transduction
from .train import TrainConfig


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the field or JSON position."""


@dataclass
class DataConfig:
    kind: str = "copy"
    seed: int = 0
    vocab_size: int = 32
    len_range: tuple[int, int] = (5, 16)
    sizes: tuple[int, int, int] = (10000, 1000, 1000)
    num_classes: int = 4
    num_keywords: int | None = None

    def __post_init__(self):
        if self.kind not in TRANSDUCTION_KINDS + (CLASSIFY,):
            raise ValueError(f"unknown task kind {self.kind!r}")

    def generate(self) -> TaskData:
        if self.kind == CLASSIFY:
            return gen_classification(self.seed, self.vocab_size, self.len_range, self.sizes,
                                      self.num_classes, self.num_keywords)
        return gen_transduction(self.kind, self.seed, self.vocab_size, self.len_range, self.sizes)


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    out_dir: str = "runs"
    seeds: list[int] = field(default_factory=lambda: [0])

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("seeds must not be empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")


def _is_dataclass_type(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def _convert(tp, value, path: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None:
            if type(None) in args:
                return None
            raise ConfigError(f"{path}: null is not allowed")
        (inner,) = [a for a in args if a is not type(None)]
        return _convert(inner, value, path)
    if _is_dataclass_type(tp):
        return _build(tp, value, path)
    if origin is tuple:
        args = typing.get_args(tp)
        if not isinstance(value, list) or len(value) != len(args):
            raise ConfigError(f"{path}: expected a list of {len(args)} items")
        return tuple(_convert(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if origin is list:
        (inner,) = typing.get_args(tp)
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        return [_convert(inner, v, f"{path}[{i}]") for i, v in enumerate(value)]
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is int or tp is str or tp is bool:
        if type(value) is not tp:
            raise ConfigError(f"{path}: expected {tp.__name__}, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported field type {tp}")


def _build(cls, obj, path: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(obj) - names)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown key {where}{unknown[0]}")
    kwargs = {k: _convert(hints[k], v, f"{path}.{k}" if path else k) for k, v in obj.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path or '<root>'}: {exc}") from exc


def parse_config(obj: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, obj, "")


def loads_config(text: str) -> ExperimentConfig:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return parse_config(obj)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return loads_config(text)


def config_dict(cfg: ExperimentConfig) -> dict:
    # asdict turns tuples into tuples; JSON wants lists.
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(config_dict(cfg), indent=2, sort_keys=True) + "\n"
