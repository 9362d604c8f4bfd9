"""Single JSON experiment config: sections {sim, backend, qnet, learn, eval,
serve}, strict key validation, and dotted-path overrides for CLI flags."""

from __future__ import annotations

import copy
import json
from dataclasses import fields
from pathlib import Path
from typing import Any, Mapping

from .backend import BackendConfig
from .learn import TrainConfig

# Subtrees whose keys are scenario parameters, validated by ScenarioSpec
# itself rather than against the default skeleton.
_FREE_FORM = {"overrides", "scenario_overrides"}


def _learn_defaults() -> dict:
    cfg = TrainConfig()
    return {f.name: copy.deepcopy(getattr(cfg, f.name))
            for f in fields(TrainConfig)}


def _backend_defaults() -> dict:
    cfg = BackendConfig()
    return {f.name: getattr(cfg, f.name) for f in fields(BackendConfig)}


def default_config() -> dict:
    """A fresh, fully-populated config dict with all defaults."""
    return {
        "sim": {
            "preset": "short_term",
            "episode_len": 600,
            "seed": 0,
            "overrides": {},
        },
        "backend": _backend_defaults(),
        "qnet": {
            "init_seed": 0,
        },
        "learn": _learn_defaults(),
        "eval": {
            "n_episodes": 16,
            "episode_len": 5000,
            "seed_start": 900_000,
            "preset": "long_term",
            "overrides": {},
            "tau": 0.2,
            "jobs": 1,
        },
        "serve": {
            "host": "127.0.0.1",
            "port": 8765,
            "stride": 50,
            "replay_capacity": 50_000,
            "retrain_updates": 64,
            "retrain_batch_size": 32,
            "retrain_lr": 1e-4,
        },
    }


class ConfigError(ValueError):
    """Raised for unknown keys, bad paths, or malformed config files."""


def _merge(dst: dict, src: Mapping, path: str) -> None:
    for key, value in src.items():
        here = f"{path}.{key}" if path else key
        if key not in dst:
            raise ConfigError(f"unknown config key {here!r}")
        if isinstance(dst[key], dict) and key not in _FREE_FORM:
            if not isinstance(value, Mapping):
                raise ConfigError(f"{here!r} must be an object")
            _merge(dst[key], value, here)
        else:
            dst[key] = copy.deepcopy(value)


def load_config(path: str | Path | None = None) -> dict:
    """Defaults overlaid with the JSON file at path; unknown keys error."""
    cfg = default_config()
    if path is None:
        return cfg
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    _merge(cfg, raw, "")
    return cfg


def set_path(cfg: dict, dotted: str, value: Any) -> None:
    """Assign cfg[a][b][c] = value for dotted path 'a.b.c'; path must exist
    unless it descends into a free-form subtree."""
    parts = dotted.split(".")
    node = cfg
    for depth, part in enumerate(parts[:-1]):
        if not isinstance(node, dict) or (part not in node
                                          and part not in _FREE_FORM):
            raise ConfigError(f"unknown config path {dotted!r}")
        if part in _FREE_FORM:
            node = node.setdefault(part, {})
        else:
            node = node[part]
    leaf = parts[-1]
    if not isinstance(node, dict):
        raise ConfigError(f"unknown config path {dotted!r}")
    free = any(p in _FREE_FORM for p in parts[:-1])
    if leaf not in node and not free:
        raise ConfigError(f"unknown config path {dotted!r}")
    node[leaf] = value


def parse_value(text: str) -> Any:
    """CLI override values: JSON when it parses, bare string otherwise."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_backend(cfg: dict) -> BackendConfig:
    return BackendConfig(**cfg["backend"])


def build_train(cfg: dict, **overrides) -> TrainConfig:
    merged = {**cfg["learn"],
              **{k: v for k, v in overrides.items() if v is not None}}
    return TrainConfig(**merged)


def save_config(cfg: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg, indent=2) + "\n", encoding="utf-8")
