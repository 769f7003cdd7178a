"""Run configuration: a JSON document with fixed sections, validated before
any work starts. Unknown sections or keys are rejected."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

DEFAULTS: dict = {
    "dataset": {
        "kind": "mnist",            # mnist | synthetic | manifest
        "root": "data/mnist",
        "manifest": None,
        "resolution": 32,
        "channels": 1,
        "n": 2000,                  # synthetic corpus size
        "num_classes": 10,
        "data_seed": 0,
        "eval_split": "test",       # mnist split used by evaluation commands
    },
    "backbone": {
        "backbone": "vaegan",
        "latent_dim": 64,
        "base_width": 16,
    },
    "weights": {
        "lambda1": 5.0,
        "lambda2": 1e-5,
        "lambda3": 1.0,
        "lambda4": 1e-5,
        "lambda5": 1.0,
        "lambda6": 5.0,
    },
    "pretrain": {
        "gan_epochs": 8,
        "gan_lr": 2e-4,
        "gan_batch_size": 64,
        "kl_weight": 1e-5,
        "classifier_epochs": 5,
        "classifier_lr": 1e-3,
        "max_steps": None,
    },
    "training": {
        "iterations": 34000,        # ~25 min single-threaded at batch 12
        "batch_size": 12,
        "seed": 0,
        "lr": 1e-4,
        "init_mode": "scratch",
        "update_order": "sequential",
        "checkpoint_every": 1000,
    },
    "eval": {
        "fid_samples": 1000,
        "probe_samples": 5000,
        "probe_split_seed": 0,
        "swap_pairs": 500,
        "interp_pairs": 500,
        "interp_steps": 8,
        "eval_seed": 0,
    },
    "output_dir": "runs",
}

_CHOICES = {
    ("dataset", "kind"): ("mnist", "synthetic", "manifest"),
    ("dataset", "eval_split"): ("train", "test"),
    ("backbone", "backbone"): ("vaegan", "resgan"),
    ("training", "init_mode"): ("scratch", "from_pretrained_encoder"),
    ("training", "update_order"): ("sequential", "simultaneous"),
}
_NONNEG = {("weights", k) for k in DEFAULTS["weights"]}
_POSITIVE = {
    ("dataset", "resolution"), ("dataset", "channels"), ("dataset", "n"), ("dataset", "num_classes"),
    ("backbone", "latent_dim"), ("backbone", "base_width"),
    ("pretrain", "gan_epochs"), ("pretrain", "gan_lr"), ("pretrain", "gan_batch_size"),
    ("pretrain", "classifier_epochs"), ("pretrain", "classifier_lr"),
    ("training", "batch_size"), ("training", "lr"), ("training", "checkpoint_every"),
    ("eval", "fid_samples"), ("eval", "probe_samples"), ("eval", "swap_pairs"), ("eval", "interp_pairs"),
    ("eval", "interp_steps"),
}


class ConfigError(ValueError):
    pass


def _check_type(where: str, default, value):
    if default is None or value is None:
        return
    if isinstance(default, bool) != isinstance(value, bool):
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {value!r}")
    if isinstance(default, (int, float)) and not isinstance(default, bool):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        if isinstance(default, int) and not isinstance(default, bool) and not float(value).is_integer():
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
    elif isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string, got {value!r}")


def validate(doc: dict) -> dict:
    """Merge ``doc`` over the defaults and return the validated config."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    cfg = copy.deepcopy(DEFAULTS)
    for section, body in doc.items():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(DEFAULTS[section], dict):
            if not isinstance(body, str):
                raise ConfigError(f"{section}: expected a string")
            cfg[section] = body
            continue
        if not isinstance(body, dict):
            raise ConfigError(f"section {section!r} must be an object")
        for key, value in body.items():
            if key not in DEFAULTS[section]:
                raise ConfigError(f"unknown key {section}.{key}")
            _check_type(f"{section}.{key}", DEFAULTS[section][key], value)
            cfg[section][key] = value
    for (section, key), allowed in _CHOICES.items():
        if cfg[section][key] not in allowed:
            raise ConfigError(f"{section}.{key} must be one of {allowed}")
    for section, key in _POSITIVE:
        if not cfg[section][key] > 0:
            raise ConfigError(f"{section}.{key} must be positive")
    for section, key in _NONNEG:
        v = cfg[section][key]
        if not (v >= 0 and v < float("inf")):
            raise ConfigError(f"{section}.{key} must be finite and >= 0")
    ts = cfg["training"]
    if ts["iterations"] is None or ts["iterations"] < 0:
        raise ConfigError("training.iterations must be >= 0")
    if cfg["dataset"]["resolution"] % 8:
        raise ConfigError("dataset.resolution must be a multiple of 8")
    if cfg["dataset"]["kind"] == "manifest" and not cfg["dataset"]["manifest"]:
        raise ConfigError("dataset.manifest is required when kind is 'manifest'")
    return cfg


def load_config(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as err:
        raise ConfigError(f"config file not found: {path}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"malformed JSON in {path}: {err}") from err
    return validate(doc)


def apply_overrides(cfg: dict, overrides: dict) -> dict:
    """Set every key named in ``overrides`` in whichever section defines it."""
    cfg = copy.deepcopy(cfg)
    for key, value in overrides.items():
        if value is None:
            continue
        if key in cfg and not isinstance(cfg[key], dict):
            cfg[key] = value
            continue
        hits = [s for s, body in cfg.items() if isinstance(body, dict) and key in body]
        if not hits:
            raise ConfigError(f"override {key!r} matches no config key")
        for s in hits:
            cfg[s][key] = value
    return validate(cfg)


def canonical_bytes(cfg: dict) -> bytes:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_bytes(cfg)).hexdigest()


def lambdas(cfg: dict) -> tuple[float, ...]:
    w = cfg["weights"]
    return tuple(float(w[f"lambda{i}"]) for i in range(1, 7))
