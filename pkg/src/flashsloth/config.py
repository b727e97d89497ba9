"""Strict JSON run configuration.

Five optional sections, every key optional::

    {"model": {...}, "compressor": {...}, "embq": {...}, "train": {...}, "cost": {...}}

Unknown sections or keys, and values of the wrong type, raise
:class:`ConfigError` before anything runs. An empty document yields the
default layout: s=3, 9 queries, hook after layer 8, query width 576, add fusion.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig

# section -> key -> (ModelConfig field or None, accepted types)
_MODEL_KEYS = {
    "model": {
        "n_layers": ("n_layers", int),
        "d_model": ("d_model", int),
        "n_heads": ("n_heads", int),
        "d_ff": ("d_ff", int),
        "vocab_size": ("vocab_size", int),
        "d_vis": ("d_vis", int),
        "grid": ("grid", int),
        "max_seq": ("max_seq", int),
        "seed": ("seed", int),
        "hd": ("hd", bool),
    },
    "compressor": {
        "kind": ("compressor", str),
        "s": ("s", int),
        "hidden": ("sap_hidden", int),
    },
    "embq": {
        "n_queries": ("n_queries", int),
        "layer": ("embq_layer", (int, list)),
        "dim": ("embq_dim", int),
        "n_layers": ("embq_n_layers", int),
        "fusion": ("fusion", str),
        "init": ("query_init", str),
        "hd_source": ("hd_embq_source", str),
    },
}


@dataclass
class TrainConfig:
    n_train: int = 8
    n_eval: int = 8
    data_seed: int = 0
    stage1_steps: int = 20
    stage2_steps: int = 60
    lr1: float = 1e-3
    lr2: float = 3e-3
    batch_size: int = 0  # 0 means full batch
    max_new: int = 4


@dataclass
class CostConfig:
    reference: str = "LLaVA-1.5-7B"
    text_len: int = 0
    benchmark: str = "average"
    bytes_per_value: int = 2


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    cost: CostConfig = field(default_factory=CostConfig)


_PLAIN_SECTIONS = {"train": TrainConfig, "cost": CostConfig}


def _check_type(where: str, value, types) -> None:
    types = types if isinstance(types, tuple) else (types,)
    if isinstance(value, bool) and bool not in types:
        raise ConfigError(f"{where}: expected {'/'.join(t.__name__ for t in types)}, got a boolean")
    if float in types and isinstance(value, int) and not isinstance(value, bool):
        return
    if not isinstance(value, types):
        raise ConfigError(f"{where}: expected {'/'.join(t.__name__ for t in types)}, got {type(value).__name__}")


def parse_config(text: str) -> RunConfig:
    try:
        doc = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as e:
        raise ConfigError(f"line {e.lineno}, column {e.colno}: {e.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError("top level must be a JSON object")
    known = set(_MODEL_KEYS) | set(_PLAIN_SECTIONS)
    for section in doc:
        if section not in known:
            raise ConfigError(f"unknown section {section!r}; expected one of {sorted(known)}")
        if not isinstance(doc[section], dict):
            raise ConfigError(f"section {section!r} must be an object")

    model_kw = {}
    for section, keys in _MODEL_KEYS.items():
        for key, value in doc.get(section, {}).items():
            if key not in keys:
                raise ConfigError(f"unknown key {section}.{key}")
            target, types = keys[key]
            _check_type(f"{section}.{key}", value, types)
            if key == "layer" and isinstance(value, list):
                if not value or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
                    raise ConfigError(f"{section}.{key}: expected an integer or a list of integers")
                value = tuple(value)
            model_kw[target] = value

    plain = {}
    for section, cls in _PLAIN_SECTIONS.items():
        fields = cls.__dataclass_fields__
        kw = {}
        for key, value in doc.get(section, {}).items():
            if key not in fields:
                raise ConfigError(f"unknown key {section}.{key}")
            default = fields[key].default
            _check_type(f"{section}.{key}", value, type(default))
            kw[key] = value
        plain[section] = cls(**kw)

    model = ModelConfig(**model_kw).validate()
    return RunConfig(model, plain["train"], plain["cost"])


def load_config(path) -> RunConfig:
    if path is None:
        return parse_config("")
    return parse_config(Path(path).read_text())
