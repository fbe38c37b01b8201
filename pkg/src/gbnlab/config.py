"""Strict TOML experiment configuration.

Example::

    seed = 0
    out_dir = "runs/gbn"

    [data]
    mnist_dir = "data/mnist5k"
    train_count = 2000
    test_count = 1000

    [model]
    conv1 = 6

    [train]
    defense = "gbn"
    epochs = 5

    [[train.attacks]]
    norm = "L1"
    epsilon = 10.0
    step_size = 1.0
    iterations = 10

    [eval]
    iterations = 20
    gating = "soft"

Unknown keys anywhere are rejected with their line and column.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, fields
from typing import Optional

import tomli

from .attacks import AttackSpec, Norm
from .gbn import GatingMode
from .models import ModelConfig
from .train import TrainConfig


class ConfigParseError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None):
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(message + where)
        self.line, self.column = line, column


@dataclass(frozen=True)
class DataSection:
    mnist_dir: str = "data/mnist5k"
    train_count: Optional[int] = 2000
    test_count: Optional[int] = 1000


@dataclass(frozen=True)
class EvalSection:
    iterations: int = 20
    restarts: int = 1
    step_factor: Optional[float] = None
    mi_iterations: int = 10
    gaussian_trials: int = 10
    gating: str = "soft"
    batch_size: int = 250
    adaptive: bool = False
    adaptive_samples: int = 200


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    data: DataSection = field(default_factory=DataSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    text: str = ""

    @property
    def gating(self) -> GatingMode:
        return GatingMode.parse(self.eval.gating)


_MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"norm", "num_branches", "seed"}
_TRAIN_KEYS = {"defense", "epochs", "batch_size", "learning_rate", "gate_learning_rate",
               "gate_clip", "weight_decay", "domains", "attacks"}
_ATTACK_KEYS = {"norm", "epsilon", "step_size", "iterations", "restarts", "decay"}


def _locate(text: str, key: str, after_line: int = 0) -> tuple:
    pattern = re.compile(rf"^\s*(\[+\s*)?([\w.\"]*\.)?\"?{re.escape(key)}\"?\s*(=|\])")
    for i, line in enumerate(text.splitlines()[after_line:], start=after_line + 1):
        m = pattern.search(line)
        if m:
            return i, line.index(key) + 1
    return None, None


def _check_keys(table: dict, allowed: set, where: str, text: str):
    for key in table:
        if key not in allowed:
            line, col = _locate(text, key)
            name = f"{where}.{key}" if where else key
            raise ConfigParseError(f"unknown config key {name!r}", line, col)


def _typed(value, kind, name: str, text: str):
    ok = {int: isinstance(value, int) and not isinstance(value, bool),
          float: isinstance(value, (int, float)) and not isinstance(value, bool),
          bool: isinstance(value, bool), str: isinstance(value, str)}[kind]
    if not ok:
        line, col = _locate(text, name.rsplit(".", 1)[-1])
        raise ConfigParseError(f"{name} must be {kind.__name__}, got {value!r}", line, col)
    return kind(value)


def _section(cls, table: dict, where: str, text: str, allowed=None):
    allowed = allowed if allowed is not None else {f.name for f in fields(cls)}
    _check_keys(table, allowed, where, text)
    types = {f.name: f.type for f in fields(cls)}
    out = {}
    for key, value in table.items():
        t = types.get(key, "")
        kind = {"int": int, "float": float, "bool": bool, "str": str,
                "Optional[int]": int, "Optional[float]": float}.get(str(t).replace("typing.", ""))
        out[key] = _typed(value, kind, f"{where}.{key}", text) if kind else value
    return out


def parse_config(text: str, seed_override: Optional[int] = None) -> ExperimentConfig:
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        m = re.search(r"line (\d+), column (\d+)", str(exc))
        line, col = (int(m.group(1)), int(m.group(2))) if m else (None, None)
        raise ConfigParseError(f"malformed config: {exc}", line, col) from exc
    _check_keys(doc, {"seed", "out_dir", "data", "model", "train", "eval"}, "", text)
    seed = _typed(doc.get("seed", 0), int, "seed", text)
    if seed_override is not None:
        seed = seed_override
    data = DataSection(**_section(DataSection, doc.get("data", {}), "data", text))
    ev = EvalSection(**_section(EvalSection, doc.get("eval", {}), "eval", text))
    try:
        GatingMode.parse(ev.gating)
    except (ValueError, IndexError) as exc:
        line, col = _locate(text, "gating")
        raise ConfigParseError(f"eval.gating: {exc}", line, col) from exc

    train_table = dict(doc.get("train", {}))
    _check_keys(train_table, _TRAIN_KEYS, "train", text)
    attacks = train_table.pop("attacks", None)
    specs = None
    if attacks is not None:
        specs = []
        for i, entry in enumerate(attacks):
            _check_keys(entry, _ATTACK_KEYS, f"train.attacks[{i}]", text)
            try:
                specs.append(AttackSpec(norm=Norm.parse(entry["norm"]), epsilon=float(entry["epsilon"]),
                                        step_size=float(entry["step_size"]),
                                        iterations=int(entry.get("iterations", 1)),
                                        restarts=int(entry.get("restarts", 1)),
                                        decay=float(entry.get("decay", 1.0)), seed=seed))
            except (KeyError, ValueError) as exc:
                line, col = _locate(text, "attacks")
                raise ConfigParseError(f"train.attacks[{i}]: {exc}", line, col) from exc
    kwargs = _section(TrainConfig, train_table, "train", text, allowed=_TRAIN_KEYS - {"attacks"})
    if "domains" in kwargs:
        kwargs["domains"] = tuple(kwargs["domains"])
    if specs is not None:
        kwargs["attack_specs"] = tuple(specs)
    try:
        train = TrainConfig(seed=seed, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigParseError(f"train: {exc}") from exc

    model_kwargs = _section(ModelConfig, doc.get("model", {}), "model", text, allowed=_MODEL_KEYS)
    model = ModelConfig(seed=seed, **model_kwargs)
    out_dir = _typed(doc.get("out_dir", "runs/default"), str, "out_dir", text)
    return ExperimentConfig(seed, out_dir, data, model, train, ev, text)


def load_config(path, seed_override: Optional[int] = None) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), seed_override)
