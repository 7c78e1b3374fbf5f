"""Hierarchical experiment configuration: TOML files, dotted overrides,
strict key validation, and a canonical content digest.

A configuration is a nested mapping whose allowed keys and value types come
from `DEFAULTS`. Unknown keys anywhere in the tree are rejected. The digest
is a SHA-256 over the canonical JSON serialization, so it is stable under
key reordering in the source file.
"""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from importlib import resources
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(Exception):
    """Invalid configuration content (maps to CLI exit code 2)."""


DEFAULTS: dict = {
    "experiment": {
        "name": "default",
        "seed": 0,
    },
    "data": {
        "language": "a",            # a | b
        "profiles": "engineered",   # engineered | distinct
        "n_speakers_per_class": 8,
        "samples_per_speaker": 3,
        "duration_min": 4.0,
        "duration_max": 8.0,
        "asr_utterances": 300,
        "asr_len_min": 3,
        "asr_len_max": 8,
    },
    "split": {
        "train_ratio": 0.70,
        "dev_ratio": 0.15,
        "test_ratio": 0.15,
        "n_versions": 3,
        "allow_dev_overlap": True,
        "seed": 0,
    },
    "asr": {
        "epochs": 30,
        "batch_size": 32,
        "lr": 1.5e-3,
        "ctc_weight": 0.3,
        "label_smoothing": 0.1,
        "n_mels": 80,
        "d_model": 64,
        "n_layers": 4,
        "n_heads": 4,
        "ff_dim": 128,
        "dropout": 0.1,
    },
    "ssl": {
        "epochs": 20,
        "batch_size": 8,
        "lr": 1e-3,
        "dim": 64,
        "n_context_layers": 4,
        "n_heads": 4,
        "ff_dim": 128,
        "dropout": 0.1,
        "groups": 2,
        "entries": 32,
        "mask_prob": 0.065,
        "mask_span": 10,
        "n_distractors": 20,
        "temperature": 0.1,
        "diversity_weight": 0.1,
        "temp_start": 2.0,
        "temp_end": 0.5,
        "finetune_epochs": 30,
        "finetune_batch_size": 16,
        "finetune_lr": 1e-3,
    },
    "finetune": {
        "encoder": "wav2vec",       # wav2vec | ctc_attn | none (scratch)
        "batch_size": 32,
        "lr": 1e-3,
        "optimizer": "adamw",
        "schedule": "linear",
        "max_epochs": 20,
        "early_stop_patience": 5,
        "layer_select": "last",
        "hidden_dim": 64,
        "dropout": 0.1,
        "augment_kind": "crop",
        "crop_len": 3.0,
        "segment_len": 3.0,
        "segment_hop": 1.0,
        "freeze_encoder": False,
    },
    "baseline": {
        "feature_set": "minlld-v1",
        "C": 1.0,
    },
    "evaluate": {
        "segment_len": 3.0,
        "segment_hop": 2.0,
        "aggregation": "vote",
    },
}


def _check_tree(node, defaults, prefix=""):
    if not isinstance(node, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a table")
    for key, value in node.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in defaults:
            raise ConfigError(f"unknown key {path!r}")
        ref = defaults[key]
        if isinstance(ref, dict):
            _check_tree(value, ref, path)
        else:
            if isinstance(ref, bool):
                ok = isinstance(value, bool)
            elif isinstance(ref, float):
                ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            elif isinstance(ref, int):
                ok = isinstance(value, int) and not isinstance(value, bool)
            else:
                ok = isinstance(value, type(ref))
            if not ok:
                raise ConfigError(
                    f"{path}: expected {type(ref).__name__}, got {type(value).__name__}")


def _merge(base: dict, patch: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in patch.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_override(item: str) -> tuple[list[str], object]:
    """'a.b.c=value' -> (['a','b','c'], parsed value). Values use TOML syntax;
    bare words fall back to strings."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key=value")
    key, _, raw = item.partition("=")
    key = key.strip()
    if not key:
        raise ConfigError(f"override {item!r} has an empty key")
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return key.split("."), value


def apply_overrides(config: dict, overrides: list[str]) -> dict:
    out = copy.deepcopy(config)
    for item in overrides:
        keys, value = parse_override(item)
        node = out
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} descends into a scalar")
        node[keys[-1]] = value
    _check_tree(out, DEFAULTS)
    return out


def load_config(path: str | Path | None = None,
                overrides: list[str] | None = None) -> dict:
    """Defaults, optionally patched by a TOML file, then dotted overrides."""
    config = copy.deepcopy(DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = tomllib.loads(path.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        _check_tree(loaded, DEFAULTS)
        config = _merge(config, loaded)
    if overrides:
        config = apply_overrides(config, overrides)
    _check_tree(config, DEFAULTS)
    return config


def canonical_json(config: dict) -> str:
    return json.dumps(config, sort_keys=True, separators=(",", ":"))


def config_digest(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def write_snapshot(config: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def read_snapshot(path: str | Path) -> dict:
    config = json.loads(Path(path).read_text(encoding="utf-8"))
    _check_tree(config, DEFAULTS)
    return config


def preset_names() -> list[str]:
    pkg = resources.files("adspeech.presets")
    return sorted(p.name[:-5] for p in pkg.iterdir() if p.name.endswith(".toml"))


def load_preset(name: str, overrides: list[str] | None = None) -> dict:
    pkg = resources.files("adspeech.presets")
    entry = pkg / f"{name}.toml"
    if not entry.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {preset_names()}")
    loaded = tomllib.loads(entry.read_text(encoding="utf-8"))
    _check_tree(loaded, DEFAULTS)
    config = _merge(copy.deepcopy(DEFAULTS), loaded)
    if overrides:
        config = apply_overrides(config, overrides)
    return config
