"""Flat run configuration: defaults, profiles, JSON files and ``--set`` overrides.

Every key is validated against :data:`CONFIG_SCHEMA` before any work starts.
"""

from __future__ import annotations

import json
from pathlib import Path

import jsonschema

from .attention import AttentionConfig
from .errors import ConfigurationError
from .training import Flags
from .twin import ModelConfig
from .uq import METHODS, UQConfig

PROFILES = ("desk", "elevator", "ads")
DOMAIN_FEATURES = {"elevator": 8, "ads": 19}

_int = {"type": "integer", "minimum": 0}
_pos = {"type": "integer", "minimum": 1}
_bool = {"type": "boolean"}
_str = {"type": "string"}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "ppt run configuration",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "profile": {"enum": list(PROFILES)},
        "domain": {"enum": list(DOMAIN_FEATURES)},
        # model
        "d_model": _pos, "n_heads": _pos, "dim_feedforward": _pos, "n_layers": _pos,
        "n_features": _int, "gru_hidden": _int, "state_dim": _int, "bins": {"type": "integer", "minimum": 2},
        "proj_dim": _pos, "batch_size": _pos, "window": {"type": "integer", "minimum": 2},
        "learning_rate": {"type": "number", "exclusiveMinimum": 0}, "patience": _pos,
        "min_delta": {"type": "number", "minimum": 0}, "max_epochs": _pos,
        "grad_clip": {"type": "number", "exclusiveMinimum": 0},
        # uncertainty
        "uq_method": {"enum": list(METHODS)}, "lam": {"type": "number", "minimum": 0, "maximum": 1},
        "n_passes": {"type": "integer", "minimum": 2},
        "dropout_p": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "n_members": {"type": "integer", "minimum": 2}, "k": _int,
        "k_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1}, "indicator_epochs": _int,
        # variant flags and weights
        "use_tl": _bool, "use_uq": _bool, "use_pt": _bool, "freeze_source": _bool,
        "alpha": {"type": "number", "minimum": 0}, "beta": {"type": "number", "minimum": 0},
        "delta": {"type": "number", "exclusiveMinimum": 0}, "prompt_form": {"enum": ["squared", "huber"]},
        # data
        "source_system": _str, "target_system": _str,
        "n_source": _pos, "n_target": _pos, "n_test": _pos,
        "n_pretrain_pairs": _pos, "n_pretrain_source": _pos, "n_pretrain_target": _pos,
        # run
        "seed": _int, "repeats": _pos, "jobs": _pos,
        "variants": {"type": "array", "items": {"enum": ["PPT", "W_O_TL", "W_O_UQ", "W_O_PT", "FINETUNE"]},
                     "minItems": 1, "uniqueItems": True},
        "uq_methods": {"type": "array", "items": {"enum": list(METHODS)}, "uniqueItems": True},
        "precision_ks": {"type": "array", "items": _pos, "minItems": 1},
        "clock": {"enum": ["wall", "steps"]},
        "data_dir": _str, "checkpoint": _str,
    },
}

DEFAULTS = {
    "profile": "desk",
    "domain": "elevator",
    "uq_method": "cs", "lam": 0.9, "n_passes": 10, "dropout_p": 0.1, "n_members": 5,
    "k": 0, "k_fraction": 0.5, "indicator_epochs": 2,
    "use_tl": True, "use_uq": True, "use_pt": True, "freeze_source": False,
    "alpha": 1.0, "beta": 1.0, "delta": 1.0, "prompt_form": "squared",
    "source_system": "UpBest", "target_system": "LunchBest",
    "n_source": 2000, "n_target": 200, "n_test": 500,
    "n_pretrain_pairs": 3, "n_pretrain_source": 1000, "n_pretrain_target": 300,
    "seed": 0, "repeats": 30, "jobs": 1,
    "variants": ["PPT", "W_O_TL", "W_O_UQ", "W_O_PT", "FINETUNE"],
    "uq_methods": [],
    "precision_ks": [1, 3, 10],
    "clock": "wall",
    "data_dir": "", "checkpoint": "",
}

_PROFILE_DATA = {
    "desk": {"domain": "elevator", "repeats": 3},
    "elevator": {"domain": "elevator", "repeats": 30},
    "ads": {"domain": "ads", "source_system": "Simple", "target_system": "Complex", "repeats": 30},
}

_MODEL_KEYS = ("n_features", "gru_hidden", "state_dim", "bins", "proj_dim", "batch_size", "window",
               "learning_rate", "patience", "min_delta", "max_epochs", "grad_clip")
_ATTN_KEYS = ("d_model", "n_heads", "dim_feedforward", "n_layers")


def parse_override(item: str) -> tuple[str, object]:
    """``key=value`` with a JSON value, falling back to the raw string."""
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def resolve(file_cfg: dict | None = None, overrides: dict | None = None) -> dict:
    """Merge defaults, profile values, a config file and overrides, then validate."""
    user = {**(file_cfg or {}), **(overrides or {})}
    validate(user)
    profile = user.get("profile", DEFAULTS["profile"])
    cfg = {**DEFAULTS, **_PROFILE_DATA[profile], **user}
    model = ModelConfig.profile(profile)
    for k in _ATTN_KEYS:
        cfg.setdefault(k, getattr(model.attention, k))
    for k in _MODEL_KEYS:
        # 0 lets the model derive these from d_model / n_features
        cfg.setdefault(k, 0 if k in ("gru_hidden", "state_dim") else getattr(model, k))
    if "n_features" not in user:
        cfg["n_features"] = DOMAIN_FEATURES[cfg["domain"]]
    validate(cfg)
    build(cfg)  # surfaces cross-field errors (e.g. d_model % n_heads) early
    return dict(sorted(cfg.items()))


def validate(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "config"
        raise ConfigurationError(f"{where}: {exc.message}") from None


def load_file(path: str | Path) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be an object")
    return data


def build(cfg: dict) -> tuple[ModelConfig, UQConfig, Flags]:
    attn = AttentionConfig(**{k: cfg[k] for k in _ATTN_KEYS})
    model = ModelConfig(attn, **{k: cfg[k] for k in _MODEL_KEYS})
    uq = UQConfig(cfg["uq_method"], cfg["lam"], cfg["n_passes"], cfg["dropout_p"], cfg["n_members"],
                  cfg["k"], cfg["k_fraction"], cfg["indicator_epochs"])
    flags = Flags(cfg["use_tl"], cfg["use_uq"], cfg["use_pt"], cfg["freeze_source"],
                  cfg["alpha"], cfg["beta"], cfg["delta"], cfg["prompt_form"])
    return model, uq, flags
