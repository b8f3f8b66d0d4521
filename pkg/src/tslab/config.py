"""Run configuration files (TOML)."""

from __future__ import annotations

import sys
from dataclasses import replace
from pathlib import Path

from .nonlinear import SimConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = ["CONFIG_KEYS", "ConfigError", "load_config", "parse_config"]

# file key -> SimConfig field
CONFIG_KEYS = {
    "d": "dim",
    "n": "n",
    "dt": "dt",
    "t_end": "t_end",
    "cfl": "cfl",
    "rho_min": "rho_min",
    "sign": "sign",
    "scheme": "scheme",
    "seed": "seed",
    "output_dir": "output_dir",
    "sample_every": "sample_every",
    "p": "p",
}


class ConfigError(ValueError):
    pass


def parse_config(data: dict, base: SimConfig | None = None) -> SimConfig:
    """Overlay the keys of a parsed table onto ``base`` (defaults if omitted)."""
    unknown = sorted(set(data) - set(CONFIG_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    kwargs = {CONFIG_KEYS[k]: v for k, v in data.items()}
    try:
        return replace(base or SimConfig(), **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path, base: SimConfig | None = None) -> SimConfig:
    try:
        with Path(path).open("rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(data, base)
