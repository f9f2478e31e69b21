"""Flat, validated run configuration loaded from TOML with ``key=value`` overrides."""

from __future__ import annotations

import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .alerts import AlertConfig
from .augment import AugmentConfig
from .model import AGGREGATORS, ModelConfig, TrainConfig
from .pipeline import PipelineConfig

__all__ = ["Config", "ConfigError", "load_config", "CONFIG_ENV"]

CONFIG_ENV = "MVDIAG_CONFIG"


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    seed: int = 0
    # alert extraction
    alert_window_ms: int = 60_000
    low_freq_fraction: float = 0.5
    score_threshold: float = 0.6
    n_trees: int = 100
    subsample_size: int = 256
    # embedding and encoders
    embedding_dim: int = 128
    hidden_dim: int = 64
    output_dim: int = 32
    n_layers: int = 2
    aggregator: str = "mean"
    head_hidden: int = 64
    # augmentation
    augmentation: bool = True
    inactivation_probability: float = 0.2
    copies_per_sample: int = 1
    # losses
    tau: float = 0.3
    omega: float = 0.1
    dynamic_weights: bool = True
    task_oriented: bool = True
    cross_modal: bool = True
    # optimisation
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 500
    patience: int = 10
    min_delta: float = 1e-4

    def validate(self) -> "Config":
        checks = [
            (self.alert_window_ms > 0, "alert_window_ms must be > 0"),
            (0.0 < self.low_freq_fraction <= 1.0, "low_freq_fraction must lie in (0, 1]"),
            (0.0 < self.score_threshold < 1.0, "score_threshold must lie in (0, 1)"),
            (self.n_trees >= 1 and self.subsample_size >= 2, "n_trees >= 1 and subsample_size >= 2"),
            (min(self.embedding_dim, self.hidden_dim, self.output_dim, self.head_hidden) >= 1,
             "layer widths must be positive"),
            (self.n_layers >= 1, "n_layers must be >= 1"),
            (self.aggregator in AGGREGATORS, f"aggregator must be one of {AGGREGATORS}"),
            (0.0 <= self.inactivation_probability < 1.0, "inactivation_probability must lie in [0, 1)"),
            (self.copies_per_sample >= 0, "copies_per_sample must be >= 0"),
            (self.tau > 0, "tau must be > 0"),
            (self.omega >= 0, "omega must be >= 0"),
            (self.lr >= 0 and self.weight_decay >= 0, "lr and weight_decay must be >= 0"),
            (self.batch_size >= 2, "batch_size must be >= 2"),
            (self.max_epochs >= 1 and self.patience >= 1, "max_epochs and patience must be >= 1"),
            (self.min_delta >= 0, "min_delta must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(
            alert=AlertConfig(
                low_freq_fraction=self.low_freq_fraction, n_trees=self.n_trees,
                subsample_size=self.subsample_size, score_threshold=self.score_threshold,
            ),
            model=ModelConfig(
                input_dim=self.embedding_dim, hidden_dim=self.hidden_dim, output_dim=self.output_dim,
                n_layers=self.n_layers, aggregator=self.aggregator, head_hidden=self.head_hidden,
                tau=self.tau, omega=self.omega, dynamic_weights=self.dynamic_weights,
                task_oriented=self.task_oriented, cross_modal=self.cross_modal,
            ),
            train=TrainConfig(self.lr, self.weight_decay, self.batch_size, self.max_epochs,
                              self.patience, self.min_delta),
            augment=AugmentConfig(self.inactivation_probability, self.copies_per_sample, self.seed),
            alert_window_ms=self.alert_window_ms,
            use_augmentation=self.augmentation,
            seed=self.seed,
        )

    def to_dict(self) -> dict:
        return asdict(self)


_TYPES = {f.name: f.type for f in fields(Config)}


def _coerce(key: str, value: Any) -> Any:
    kind = _TYPES[key]
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be a boolean")
        return value
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key} must be a string")
    return value


def _parse_override(item: str) -> tuple[str, Any]:
    key, sep, raw = item.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError(f"override {item!r} is not key=value")
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return key, value


def load_config(path: str | Path | None = None, overrides: Sequence[str] = ()) -> Config:
    """Defaults, then the TOML file (or ``$MVDIAG_CONFIG``), then ``key=value`` overrides."""
    values: dict[str, Any] = {}
    if path is None:
        path = os.environ.get(CONFIG_ENV) or None
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        try:
            values.update(tomllib.loads(p.read_text()))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from None
    for item in overrides:
        k, v = _parse_override(item)
        values[k] = v
    unknown = sorted(set(values) - set(_TYPES))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return Config(**{k: _coerce(k, v) for k, v in values.items()}).validate()
