"""TOML run configuration with one section per pipeline stage."""
from __future__ import annotations

import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SECTIONS = ("train", "generate", "style", "metrics", "seg")


class ConfigError(ValueError):
    """Bad configuration file, key or value."""


def load_config(path: str | Path | None) -> dict:
    if path is None:
        return {s: {} for s in SECTIONS}
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section: [{unknown[0]}]")
    base = path.parent
    for section in data.values():
        section.setdefault("_base", str(base))
    return {s: data.get(s, {}) for s in SECTIONS}


def check_keys(section: str, values: dict, allowed) -> None:
    unknown = sorted(k for k in values if k not in allowed and not k.startswith("_"))
    if unknown:
        raise ConfigError(f"unknown config key: {section}.{unknown[0]}")


def merge(section: dict, **overrides) -> dict:
    """Config-file values overridden by command-line flags that were actually given."""
    given = {k: v for k, v in overrides.items() if v is not None}
    out = dict(section)
    out.update(given)
    out["_cli"] = tuple(given)
    return out


def resolve(values: dict, key: str, required: bool = True) -> Path | None:
    """Path-valued key, relative paths taken against the config file's directory."""
    raw = values.get(key)
    if raw is None:
        if required:
            raise ConfigError(f"missing required setting: {key}")
        return None
    p = Path(raw)
    if not p.is_absolute() and "_base" in values and key not in values.get("_cli", ()):
        p = Path(values["_base"]) / p
    return p
