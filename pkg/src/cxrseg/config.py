"""Experiment configuration: defaults < JSON file < ``section.key=value`` overrides."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from cxrseg.losses import LossConfig
from cxrseg.nets import CriticConfig, UNetConfig
from cxrseg.preprocess import ClaheConfig, PreprocessConfig
from cxrseg.training import TrainConfig

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SplitConfig:
    fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)
    seed: int = 42

    def __post_init__(self):
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))


@dataclass(frozen=True)
class ExperimentConfig:
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    critic: CriticConfig = field(default_factory=CriticConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: SplitConfig = field(default_factory=SplitConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return _build(cls, data, "")


def _build(kind, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(kind)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(f'{path}{k}' for k in unknown)}")
    values = {}
    for name, value in data.items():
        sub = _nested_type(kind, name)
        values[name] = _build(sub, value, f"{path}{name}.") if sub is not None else value
        if isinstance(values[name], list):
            values[name] = tuple(values[name])
    try:
        return kind(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path.rstrip('.') or 'config'}: {exc}") from exc


_NESTED = {
    (ExperimentConfig, "preprocess"): PreprocessConfig,
    (ExperimentConfig, "unet"): UNetConfig,
    (ExperimentConfig, "critic"): CriticConfig,
    (ExperimentConfig, "loss"): LossConfig,
    (ExperimentConfig, "train"): TrainConfig,
    (ExperimentConfig, "split"): SplitConfig,
    (PreprocessConfig, "clahe"): ClaheConfig,
}


def _nested_type(kind, name):
    return _NESTED.get((kind, name))


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> ExperimentConfig:
    data = ExperimentConfig().to_dict()
    if path is not None:
        try:
            file_data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: cannot read config ({exc})") from exc
        ExperimentConfig.from_dict(file_data)  # rejects unknown keys before merging
        _merge(data, file_data, "", source=str(path))
    for text in overrides:
        keys, value = parse_override(text)
        patch: dict = {}
        node = patch
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
        _merge(data, patch, "", source="command line")
    return ExperimentConfig.from_dict(data)


def _merge(base: dict, patch: dict, path: str, source: str) -> None:
    for key, value in patch.items():
        if key not in base:
            raise ConfigError(f"unknown config key: {path}{key}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}{key}: expected an object")
            _merge(base[key], value, f"{path}{key}.", source)
        else:
            if base[key] != value:
                log.info("config %s%s: %r -> %r (%s)", path, key, base[key], value, source)
            base[key] = value
