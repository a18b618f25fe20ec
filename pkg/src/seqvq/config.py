"""Versioned JSON run configuration.

Each subcommand has a complete default tree; user files may override any
subset but may not introduce unknown keys (typos fail loudly, recursively).
Dotted ``--set`` overrides go through the same validation.
"""

from __future__ import annotations

import copy
import json

from .errors import ConfigError

SCHEMA_VERSION = 1

_MODEL_DEFAULTS = {
    "layers": 2,
    "hidden": 32,
    "heads": 4,
    "vocab_or_classes": 4,
    "max_tokens": 17,
    "causal": False,
    "mlp_expansion": 4,
    "codebook_size": 8,
    "groups": 1,
}

DEFAULTS: dict[str, dict] = {
    "infer": {
        "schema_version": SCHEMA_VERSION,
        "seed": 0,
        "mode": "classify",
        "model": dict(_MODEL_DEFAULTS),
        "devices": 4,
        "workers": 1,
        "cls_mode": "distributed",
        "tokens": 16,
        "steps": 8,
        "checkpoint": None,
        "out_dir": "out/infer",
    },
    "bench": {
        "schema_version": SCHEMA_VERSION,
        "comms": {
            "layers": 12,
            "hidden": 768,
            "tokens": 1024,
            "devices": 4,
            "bandwidth_mbps": 10.0,
            "codebook_size": 1024,
            "groups": 1,
            "precision_bits": 32,
            "msg_latency_s": 0.0,
            "heads": 12,
            "mlp_expansion": 4,
            "seconds_per_flop": 5e-13,
        },
        "methods": ["single", "astra", "sp", "tp", "bp_ag", "bp_sp"],
        "bandwidths_mbps": [10.0, 50.0, 100.0, 500.0],
        "devices": [4],
        "tokens": [1024],
        "out_dir": "out/bench",
    },
    "verify": {
        "schema_version": SCHEMA_VERSION,
        "seed": 0,
        "theorem1": {
            "dim": 8,
            "lam": None,
            "trials": 200,
            "mean_scale": 0.1,
            "residual_var": 0.04,
        },
        "theorem2": {
            "tokens": 16,
            "dim": 8,
            "devices": [1, 2, 4, 8],
            "sigma": 1e-3,
            "trials": 10000,
            "tolerance": 0.2,
        },
        "out_dir": "out/verify",
    },
    "train": {
        "schema_version": SCHEMA_VERSION,
        "seed": 0,
        "task": "classify",
        "model": dict(_MODEL_DEFAULTS),
        "devices": 4,
        "cls_mode": "distributed",
        "tokens": 16,
        "train_count": 128,
        "val_count": 256,
        "beta": 0.25,
        "lam": 0.0,
        "lr": 3e-3,
        "epochs": 5,
        "batch_size": 8,
        "refresh_residual_stats": False,
        "out_dir": "out/train",
    },
    "ablate": {
        "schema_version": SCHEMA_VERSION,
        "settings": {
            "hidden": 32,
            "layers": 2,
            "heads": 4,
            "tokens": 16,
            "devices": 4,
            "codebook_size": 8,
            "lr": 3e-3,
            "epochs": 5,
            "batch_size": 8,
            "train_count": 128,
            "val_count": 256,
            "lams": [0.0, 1.0],
            "betas": [0.25],
            "groups_set": [1],
            "cls_modes": ["single", "distributed"],
            "seeds": [0, 1, 2, 3, 4],
        },
        "out_dir": "out/ablate",
    },
}


def _check_keys(user: dict, defaults: dict, path: str) -> None:
    for key, value in user.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key {where!r}")
        base = defaults[key]
        if isinstance(base, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be an object")
            _check_keys(value, base, where)


def _merge(defaults: dict, user: dict) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        if isinstance(out.get(key), dict) and isinstance(value, dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_set(expr: str):
    """'a.b.c=value' -> (['a','b','c'], parsed value); values parse as JSON
    with a bare-string fallback."""
    if "=" not in expr:
        raise ConfigError(f"--set needs key=value, got {expr!r}")
    key, raw = expr.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"--set needs a non-empty key in {expr!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def _apply_set(cfg: dict, path: list[str], value) -> None:
    node = cfg
    for part in path[:-1]:
        nxt = node.get(part)
        if not isinstance(nxt, dict):
            raise ConfigError(f"--set path {'.'.join(path)!r} does not name a section")
        node = nxt
    node[path[-1]] = value


def load_config(command: str, path: str | None, overrides=()) -> dict:
    """Defaults for ``command``, overlaid with the JSON file at ``path`` (if
    any) and then the --set overrides; every key is validated."""
    if command not in DEFAULTS:
        raise ConfigError(f"unknown command {command!r}")
    defaults = DEFAULTS[command]
    user: dict = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                user = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}")
        if not isinstance(user, dict):
            raise ConfigError("config root must be a JSON object")
    cfg = _merge(defaults, user)
    for expr in overrides:
        _apply_set(cfg, *parse_set(expr))
    _check_keys(cfg, defaults, "")
    version = cfg.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    return cfg


def config_digest(cfg: dict) -> str:
    """Canonical content hash: sorted keys, compact separators."""
    import hashlib

    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()
