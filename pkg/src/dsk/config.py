"""Run configuration: a single versioned JSON document.

Unknown keys anywhere in the document are errors (hyperparameter typos must
not pass silently); every stage artifact embeds the hash of the config
section that produced it so downstream stages can refuse mismatched inputs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


_KS_KEYS = {
    "L": float, "nu": float, "n_grid": int, "dt": float, "n_c": int,
    "ramp_time": float, "sample_interval": float,
    "n_snapshots_per_traj": int, "n_trajectories": int,
}

_SCHEMA: dict[str, Any] = {
    "version": int,
    "name": str,
    "seed": int,
    "hf": _KS_KEYS,
    "lf": _KS_KEYS,
    "selection": {"d_prime": int, "offset": int},
    "ot": {"epsilon": float, "n_samples": int, "max_iters": int, "tol": float},
    "unet": {
        "channels": list, "blocks_per_level": int, "emb_dim": int,
        "groups": int, "kernel": int,
    },
    "train": {
        "steps": int, "batch_size": int, "lr_max": float, "lr_min": float,
        "warmup_steps": int, "grad_clip": float, "ema_decay": float,
    },
    "sampling": {
        "n_steps": int, "alpha_tilde": float, "n_conditions": int,
        "samples_per_condition": int, "terminal_denoise": bool,
        "n_unconditional": int, "batch_size": int,
    },
    "metrics": {
        "mmd_bandwidth_scales": list, "wass1_range": list, "wass1_bins": int,
        "kde_grid": int,
    },
}

DEFAULTS: dict[str, Any] = {
    "version": CONFIG_VERSION,
    "name": "desk",
    "seed": 1234,
    "hf": {
        "L": 64.0, "nu": 1.0, "n_grid": 192, "dt": 0.0025, "n_c": 30,
        "ramp_time": 25.0, "sample_interval": 12.5,
        "n_snapshots_per_traj": 80, "n_trajectories": 64,
    },
    "lf": {
        "L": 64.0, "nu": 1.0, "n_grid": 48, "dt": 0.02, "n_c": 30,
        "ramp_time": 25.0, "sample_interval": 12.5,
        "n_snapshots_per_traj": 80, "n_trajectories": 64,
    },
    "selection": {"d_prime": 24, "offset": 0},
    "ot": {"epsilon": 1e-3, "n_samples": 4000, "max_iters": 5000, "tol": 1e-6},
    "unet": {
        "channels": [16, 32, 64], "blocks_per_level": 2, "emb_dim": 32,
        "groups": 8, "kernel": 3,
    },
    "train": {
        "steps": 20_000, "batch_size": 32, "lr_max": 1e-3, "lr_min": 1e-6,
        "warmup_steps": 1_000, "grad_clip": 1.0, "ema_decay": 0.95,
    },
    "sampling": {
        "n_steps": 256, "alpha_tilde": 1.0, "n_conditions": 128,
        "samples_per_condition": 4, "terminal_denoise": True,
        "n_unconditional": 512, "batch_size": 256,
    },
    "metrics": {
        "mmd_bandwidth_scales": [0.5, 1.0, 2.0, 4.0],
        "wass1_range": [-20.0, 20.0], "wass1_bins": 400, "kde_grid": 512,
    },
}


def _check(node: Any, schema: Any, path: str) -> Any:
    if isinstance(schema, dict):
        if not isinstance(node, dict):
            raise ConfigError(f"{path or '<root>'}: expected an object")
        unknown = set(node) - set(schema)
        if unknown:
            raise ConfigError(f"{path or '<root>'}: unknown key(s) {sorted(unknown)}")
        out = {}
        for key, sub in schema.items():
            if key not in node:
                raise ConfigError(f"{path + '.' if path else ''}{key}: missing")
            out[key] = _check(node[key], sub, f"{path + '.' if path else ''}{key}")
        return out
    if schema is float:
        if isinstance(node, bool) or not isinstance(node, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {type(node).__name__}")
        return float(node)
    if schema is int:
        if isinstance(node, bool) or not isinstance(node, int):
            raise ConfigError(f"{path}: expected an integer, got {type(node).__name__}")
        return node
    if schema is bool:
        if not isinstance(node, bool):
            raise ConfigError(f"{path}: expected a boolean, got {type(node).__name__}")
        return node
    if schema is str:
        if not isinstance(node, str):
            raise ConfigError(f"{path}: expected a string, got {type(node).__name__}")
        return node
    if schema is list:
        if not isinstance(node, list):
            raise ConfigError(f"{path}: expected a list, got {type(node).__name__}")
        return node
    raise AssertionError(f"bad schema node at {path}")


def _merge_defaults(node: dict, defaults: dict) -> dict:
    out = dict(defaults)
    for key, value in node.items():
        if isinstance(value, dict) and isinstance(defaults.get(key), dict):
            out[key] = _merge_defaults(value, defaults[key])
        else:
            out[key] = value
    return out


@dataclass
class RunConfig:
    raw: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.raw[key]

    def section_hash(self, *sections: str) -> str:
        """Stable hash over the named sections plus the master seed."""
        payload = {"seed": self.raw["seed"]}
        for s in sections:
            payload[s] = self.raw[s]
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def pipeline_hash(self) -> str:
        """Hash over every artifact-shaping section; all stage outputs carry
        this value so `report` can detect mixed-provenance inputs."""
        return self.section_hash("hf", "lf", "selection", "ot", "unet",
                                 "train", "sampling")


def validate_config(document: dict) -> RunConfig:
    merged = _merge_defaults(document, DEFAULTS)
    checked = _check(merged, _SCHEMA, "")
    if checked["version"] != CONFIG_VERSION:
        raise ConfigError(f"version: expected {CONFIG_VERSION}, got {checked['version']}")
    if checked["seed"] < 0 or checked["seed"] >= 2**64:
        raise ConfigError("seed: must fit an unsigned 64-bit integer")
    return RunConfig(raw=checked)


def load_config(path: str | Path) -> RunConfig:
    try:
        document = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})")
    if not isinstance(document, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return validate_config(document)
