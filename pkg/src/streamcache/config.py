"""Simulation configuration and its JSON loader."""

from __future__ import annotations

import json
from dataclasses import dataclass, fields, asdict


class ConfigError(ValueError):
    """Raised when a config document or field value is invalid."""


@dataclass(frozen=True)
class SimConfig:
    fps: float = 4.0
    tokens_per_frame: int = 1
    d: int = 64
    N_S: int = 64
    N_L: int = 5
    tau: int = 8
    mean_step_s: float = 32.0
    step_s_jitter: float = 8.0
    vocab_size: int = 128
    seed: int = 7
    lambda_1: float = 2.0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def validate_config(cfg: SimConfig) -> SimConfig:
    """Return ``cfg`` unchanged if every invariant holds, else raise
    ``ConfigError`` naming the offending field."""
    if cfg.fps <= 0:
        raise ConfigError(f"fps must be > 0, got {cfg.fps}")
    if cfg.tokens_per_frame < 1:
        raise ConfigError(f"tokens_per_frame must be >= 1, got {cfg.tokens_per_frame}")
    if cfg.d < 1:
        raise ConfigError(f"d must be >= 1, got {cfg.d}")
    if cfg.N_S < 1:
        raise ConfigError(f"N_S must be >= 1, got {cfg.N_S}")
    if cfg.N_L < 0:
        raise ConfigError(f"N_L must be >= 0, got {cfg.N_L}")
    if cfg.tau < 0:
        raise ConfigError(f"tau must be >= 0, got {cfg.tau}")
    if cfg.mean_step_s <= 0:
        raise ConfigError(f"mean_step_s must be > 0, got {cfg.mean_step_s}")
    if cfg.step_s_jitter < 0:
        raise ConfigError(f"step_s_jitter must be >= 0, got {cfg.step_s_jitter}")
    if cfg.vocab_size < 2:
        raise ConfigError(f"vocab_size must be >= 2, got {cfg.vocab_size}")
    if cfg.lambda_1 < 0:
        raise ConfigError(f"lambda_1 must be >= 0, got {cfg.lambda_1}")
    if not isinstance(cfg.seed, int):
        raise ConfigError(f"seed must be an integer, got {cfg.seed!r}")
    return cfg


_FIELD_NAMES = {f.name for f in fields(SimConfig)}
_INT_FIELDS = {"tokens_per_frame", "d", "N_S", "N_L", "tau", "vocab_size", "seed"}


def config_from_dict(data: dict) -> SimConfig:
    """Build a validated config from a plain dict.

    Unknown keys are an error; missing keys fall back to defaults.
    """
    if not isinstance(data, dict):
        raise ConfigError("config document must be a JSON object")
    unknown = set(data) - _FIELD_NAMES
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        if name in _INT_FIELDS:
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{name} must be an integer, got {value!r}")
            kwargs[name] = int(value)
        else:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{name} must be a number, got {value!r}")
            kwargs[name] = float(value)
    return validate_config(SimConfig(**kwargs))


def load_config(path: str) -> SimConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(data)
