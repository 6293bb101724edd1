"""Presets and config-file parsing (TOML, or JSON by extension)."""
from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .backbone import AmirConfig
from .data import DataConfig
from .errors import ConfigError
from .training import TrainConfig

PRESETS = ("paper-default", "desk-scale")


@dataclass
class Settings:
    preset: str
    model: AmirConfig
    train: TrainConfig
    data: DataConfig

    def to_dict(self) -> dict:
        return {"preset": self.preset, "model": self.model.to_dict(),
                "train": self.train.to_dict(), "data": self.data.to_dict()}


def preset_values(name: str) -> dict:
    """Raw section dicts for a preset."""
    if name == "paper-default":
        return {
            "model": {"channels": 42, "blocks": [5, 7, 7, 9], "refinement_blocks": 4,
                      "dictionary_size": 16, "num_experts": 4, "top_k": 2},
            "train": {"patch_size": 128, "batch_size": 8, "iterations": 200_000,
                      "lr_max": 2e-4, "lr_min": 1e-6, "gamma": 0.01},
            "data": {"source": "directory", "image_size": 256},
        }
    if name == "desk-scale":
        return {
            "model": {"channels": 16, "blocks": [1, 1, 1, 2], "refinement_blocks": 1,
                      "dictionary_size": 16, "num_experts": 4, "top_k": 2},
            "train": {"patch_size": 32, "batch_size": 8, "iterations": 2000,
                      "lr_max": 2e-4, "lr_min": 1e-6, "gamma": 0.01},
            "data": {"source": "synthetic", "num_sources": 60, "image_size": 64},
        }
    raise ConfigError(f"preset={name!r} must be one of {PRESETS}")


SECTIONS = {"model": AmirConfig, "train": TrainConfig, "data": DataConfig}


def _check_keys(section: str, values: dict) -> None:
    known = {f.name for f in fields(SECTIONS[section])}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")


def build_settings(raw: Optional[dict] = None, overrides: Optional[dict] = None,
                   preset: Optional[str] = None) -> Settings:
    """Merge preset < file values < overrides and validate.

    ``overrides`` uses the same {section: {key: value}} layout as the file.
    """
    raw = dict(raw or {})
    name = preset or raw.pop("preset", "paper-default")
    raw.pop("preset", None)
    extra = sorted(set(raw) - set(SECTIONS))
    if extra:
        raise ConfigError(f"unknown top-level key(s): {', '.join(extra)}")
    merged = preset_values(name)
    for layer in (raw, overrides or {}):
        for section, values in layer.items():
            if not isinstance(values, dict):
                raise ConfigError(f"[{section}] must be a table, got {values!r}")
            _check_keys(section, values)
            merged.setdefault(section, {}).update(values)
    try:
        model = AmirConfig(**merged.get("model", {}))
        train = TrainConfig(**merged.get("train", {}))
        data = DataConfig(**merged.get("data", {}))
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return Settings(name, model, train, data)


def load_raw(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    text = path.read_text()
    try:
        if path.suffix.lower() == ".json":
            return json.loads(text) if text.strip() else {}
        return tomllib.loads(text)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None


def parse_config(path=None, overrides: Optional[dict] = None, preset: Optional[str] = None) -> Settings:
    raw = load_raw(path) if path is not None else {}
    return build_settings(raw, overrides, preset)
