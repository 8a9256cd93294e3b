"""Run configuration: a schema-validated JSON document, hashed for provenance.

Unknown keys are rejected so typos cannot silently fall back to defaults.
Every artifact a command writes embeds {tool version, config hash, seed}.
"""

from __future__ import annotations

import copy
import hashlib
import json

from .errors import ConfigError, SchemaError

DEFAULT_CONFIG = {
    "data": {
        "n_traces": 16,
        "frames_per_segment": 150,
        "cycles": 1,
        "sample_rate": 10.0,
        "n_features": 6,
        "ar_coeff": 0.8,
        "noise_scale": 0.3,
        "osc_amp": 1.0,
        "timestep": 30,
        "train_stride": 1,
        "val_stride": 5,
        "eval_stride": 30,
        "signature_stride": 5,
        "fractions": [0.5, 0.125, 0.375],
    },
    "model": {
        "family": "lstm",
        "scale": "desk",              # desk | paper
    },
    "train": {
        "learning_rate": 0.001,
        "epochs": 200,
        "batch_size": 256,
        "patience": 30,
    },
    "attack": {
        "kinds": ["fgsm", "pgd", "cw"],
        "epsilon": 0.1,
        "alpha": 0.01,
        "iterations": 20,
        "cw_confidence": 0.0,
        "cw_trade_off": 1.0,
        "cw_binary_search_steps": 1,
        "cw_inner_iterations": 1000,
        "cw_inner_learning_rate": 0.01,
        "transfer_families": ["gru", "lstm"],
    },
    "explain": {
        "background_k": 100,
        "n_permutations": 200,
        "n_local_windows": 8,
    },
    "detector": {
        "kinds": ["rf", "gbt", "ffnn"],
        "threshold": 0.5,
        "rf_trees": 30,
        "rf_max_depth": 16,
        "gbt_estimators": 40,
        "gbt_learning_rate": 0.05,
        "gbt_max_depth": 3,
        "ffnn_epochs": 100,
        "ffnn_batch": 64,
        "ffnn_learning_rate": 0.001,
        "per_kind_train": 200,
        "per_kind_test": 70,
    },
    "pipeline": {
        "start_seconds": 60.0,
        "duration_seconds": 120.0,
        "attack_kind": "pgd",
        "detector_kind": "gbt",
        "live_frames_per_segment": 1200,
        "live_cycles": 1,
        "decision_interval": 1,
    },
    "seeds": {
        "data": 100,
        "split": 19,
        "model": 1,
        "train": 3,
        "attack": 7,
        "background": 11,
        "explain": 23,
        "detector": 13,
        "pipeline": 17,
        "live_trace": 777,
    },
    "output_dir": "runs/default",
    "threads": 1,
}


def _check_keys(doc, default, path=""):
    if isinstance(default, dict):
        if not isinstance(doc, dict):
            raise SchemaError(f"config{path or ' root'}: expected an object")
        for key, value in doc.items():
            if key not in default:
                raise SchemaError(f"config: unknown key '{path}.{key}'".replace("..", "."))
            _check_keys(value, default[key], f"{path}.{key}")
    elif isinstance(default, bool):
        if not isinstance(doc, bool):
            raise SchemaError(f"config{path}: expected a boolean")
    elif isinstance(default, (int, float)):
        if isinstance(doc, bool) or not isinstance(doc, (int, float)):
            raise SchemaError(f"config{path}: expected a number")
    elif isinstance(default, str):
        if not isinstance(doc, str):
            raise SchemaError(f"config{path}: expected a string")
    elif isinstance(default, list):
        if not isinstance(doc, list):
            raise SchemaError(f"config{path}: expected a list")


def merge_config(overrides: dict) -> dict:
    """Overlay a partial document on the defaults, rejecting unknown keys."""
    _check_keys(overrides, DEFAULT_CONFIG)

    def overlay(base, over):
        out = copy.deepcopy(base)
        for k, v in over.items():
            if isinstance(v, dict):
                out[k] = overlay(base[k], v)
            else:
                out[k] = copy.deepcopy(v)
        return out

    return overlay(DEFAULT_CONFIG, overrides)


def load_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"config {path}: invalid JSON ({exc})") from None
    return merge_config(doc)


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def apply_dotted_override(cfg: dict, dotted: str, raw: str) -> dict:
    """Apply one `section.key=value` CLI override onto a resolved config."""
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node, dict) or k not in node:
            raise SchemaError(f"config: unknown key '{dotted}'")
        node = node[k]
    leaf = keys[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise SchemaError(f"config: unknown key '{dotted}'")
    current = node[leaf]
    try:
        if isinstance(current, bool):
            value = raw.lower() in ("1", "true", "yes")
        elif isinstance(current, int):
            value = int(raw)
        elif isinstance(current, float):
            value = float(raw)
        elif isinstance(current, list):
            value = json.loads(raw)
            if not isinstance(value, list):
                raise ValueError("expected a JSON list")
        else:
            value = raw
    except (ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"override {dotted}={raw!r}: {exc}") from None
    node[leaf] = value
    return cfg
