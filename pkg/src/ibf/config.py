"""Flat TOML run configuration with typed keys and CLI overrides."""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Dict, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .augment import AugmentConfig
from .loss import WeightConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


# key -> (type, default)
KEYS: Dict[str, tuple] = {
    "batch_size": (int, 13),
    "learning_rate": (float, 2e-4),
    "iterations": (int, 100000),
    "beta1": (float, 0.9),
    "beta2": (float, 0.999),
    "epsilon": (float, 1e-8),
    "checkpoint_every": (int, 1000),
    "keep_last": (int, 3),
    "log_every": (int, 10),
    "weight_mode": (str, "scan"),
    "w_min": (float, 1.0 / 20.0),
    "w_max": (float, 1.0),
    "delta": (int, 40),
    "theta_r": (float, 20.0),
    "rotation": (bool, False),
    "crop_width": (int, 1024),
    "crop_height": (int, 512),
    "identity_crop_only": (bool, False),
    "seed": (int, 0),
    "rng": (str, "pcg64"),
    "low_multiplier": (int, 1),
    "channel_cap": (int, 0),  # 0 = no cap
}

PRESETS = ("douga", "cel", "douga2", "overfit")


def _coerce(key: str, value: Any):
    typ = KEYS[key][0]
    if typ is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if typ is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if typ is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if isinstance(value, str):
        try:
            return typ(value)
        except ValueError:
            pass
    if isinstance(value, typ) and not isinstance(value, bool):
        return value
    raise ConfigError(f"{key}: expected {typ.__name__}, got {value!r}")


@dataclass
class RunConfig:
    values: Dict[str, Any] = field(default_factory=lambda: {k: d for k, (_, d) in KEYS.items()})
    source: Optional[str] = None

    def update(self, mapping: Dict[str, Any]):
        unknown = sorted(set(mapping) - set(KEYS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for k, v in mapping.items():
            self.values[k] = _coerce(k, v)
        return self

    def __getitem__(self, key):
        return self.values[key]

    def train_config(self) -> TrainConfig:
        v = self.values
        if v["rng"].lower() != "pcg64":
            raise ConfigError(f"rng: only 'pcg64' is supported, got {v['rng']!r}")
        try:
            return TrainConfig(
                batch_size=v["batch_size"],
                learning_rate=v["learning_rate"],
                iterations=v["iterations"],
                beta1=v["beta1"],
                beta2=v["beta2"],
                epsilon=v["epsilon"],
                checkpoint_every=v["checkpoint_every"],
                keep_last=v["keep_last"],
                weights=WeightConfig(v["weight_mode"], v["w_min"], v["w_max"]),
                augment=AugmentConfig(
                    delta=v["delta"],
                    theta_r=v["theta_r"],
                    rotation=v["rotation"],
                    crop=(v["crop_width"], v["crop_height"]),
                    identity_crop_only=v["identity_crop_only"],
                ),
                seed=v["seed"],
                low_multiplier=v["low_multiplier"],
                channel_cap=v["channel_cap"] or None,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def parse_toml(text: str, source: str = "<string>") -> Dict[str, Any]:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    nested = [k for k, v in data.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"{source}: config is flat; tables not allowed ({', '.join(nested)})")
    return data


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return resources.files("ibf.presets").joinpath(f"{name}.toml").read_text()


def load_config(path=None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Defaults, then a file (path or preset name), then overrides."""
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if p.is_file():
            cfg.update(parse_toml(p.read_text(), str(p)))
            cfg.source = str(p)
        elif str(path) in PRESETS:
            cfg.update(parse_toml(preset_text(str(path)), f"preset:{path}"))
            cfg.source = f"preset:{path}"
        else:
            raise ConfigError(f"config {path} not found (and not a preset name)")
    if overrides:
        cfg.update(overrides)
    cfg.train_config()
    return cfg
