"""Run configuration: defaults, JSON config files and dotted-key overrides.

Precedence is flag override > config file > default. Every key must exist in
:data:`DEFAULTS`; values are type-checked against the default's type.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "seed": 0,
    "out_dir": "run",
    "corpus": {"path": None, "eval_fraction": 0.1, "toy_bytes": 300_000, "toy_seed": 0},
    "backbone": {
        "checkpoint": None, "vocab_size": 256, "d_model": 128, "n_layers": 4,
        "n_attn_heads": 4, "max_context": 512, "d_ff": 512,
    },
    "train": {
        "lr": None, "batch_size": 16, "steps": 1000, "seq_len": 128, "warmup": 100,
        "min_lr_ratio": 0.1, "loss_weights": None, "eval_windows": 32,
    },
    "heads": {
        "paradigm": "cerberus", "checkpoint": None, "n_heads": 4, "resblocks": 4,
        "special_position": 1, "resblock_variant": "outer", "workers": 1,
    },
    "gate": {"enabled": True, "threshold": None, "source": "hidden", "parallel_overhead": 0.0},
    "tree": {"paths": 63, "template_file": None, "top_k": 10},
    "decode": {"prompt": "", "max_new_tokens": 64, "stop_token": None},
    "bench": {
        "suite": None, "per_category": 13, "paradigms": ["medusa", "cerberus"], "trees": [63, 120, 150],
        "max_new_tokens": 64, "workers": 1, "calibration_prompts": 16, "traces": None,
    },
    "eval": {"max_windows": 32},
}

# Flags accepted without their section prefix.
ALIASES = {
    "paradigm": "heads.paradigm",
    "paths": "tree.paths",
    "top_k": "tree.top_k",
    "heads": "heads.n_heads",
    "prompt": "decode.prompt",
    "max_new_tokens": "decode.max_new_tokens",
    "backbone": "backbone.checkpoint",
    "heads_ckpt": "heads.checkpoint",
    "corpus": "corpus.path",
    "steps": "train.steps",
    "templates": "tree.template_file",
    "threshold": "gate.threshold",
    "traces": "bench.traces",
    "suite": "bench.suite",
}

CHOICES = {
    "heads.paradigm": ("vanilla", "medusa", "cerberus"),
    "heads.resblock_variant": ("outer", "canonical"),
    "gate.source": ("hidden", "logits"),
}


def defaults() -> dict:
    return copy.deepcopy(DEFAULTS)


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


_DEFAULT_FLAT = _flatten(DEFAULTS)
KEYS = tuple(_DEFAULT_FLAT)


def canonical_key(key: str) -> str:
    key = key.lstrip("-").replace("-", "_")
    key = ALIASES.get(key, key)
    if key not in _DEFAULT_FLAT:
        raise ConfigError(f"unknown config key {key!r}")
    return key


def _check_type(key: str, value):
    default = _DEFAULT_FLAT[key]
    if value is None or default is None:
        ok = value is None or isinstance(value, (str, int, float, list)) and not isinstance(value, bool)
        if key == "gate.threshold" and isinstance(value, str):
            ok = False
    elif isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"bad value for {key}: {value!r}")
    if key in CHOICES and value not in CHOICES[key]:
        raise ConfigError(f"{key} must be one of {', '.join(CHOICES[key])}")
    return value


def parse_value(text: str):
    """Flag values are JSON when they parse as JSON, else plain strings."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_key(cfg: dict, key: str, value) -> None:
    key = canonical_key(key)
    value = _check_type(key, value)
    *path, leaf = key.split(".")
    node = cfg
    for p in path:
        node = node[p]
    node[leaf] = value


def load_file(path) -> dict:
    """Flattened dotted keys from a JSON config file (nested or dotted form)."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file {path} not found")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON ({exc.msg})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return _flatten(raw)


def resolve(file_values: dict | None = None, overrides: dict | None = None) -> dict:
    cfg = defaults()
    for source in (file_values or {}, overrides or {}):
        for k, v in source.items():
            set_key(cfg, k, v)
    return cfg


def get(cfg: dict, key: str):
    node = cfg
    for p in canonical_key(key).split("."):
        node = node[p]
    return node
