"""Flat ``key = value`` run configuration with lossless echo.

``dump_config(parse_config(text))`` reproduces the same canonical form, so a
run's config file is a complete, replayable record. Command-line flags
override file values; ``dump_config`` of the merged result is written next
to the run outputs.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .trainer import TrainConfig

__all__ = ["RunConfig", "parse_config", "dump_config", "ConfigError"]


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig(TrainConfig):
    """Training configuration plus dataset paths and export directories."""

    train_manifest: str = ""
    test_manifest: str = ""
    descriptions: str = ""
    out_dir: str = "runs/default"
    export_dir: str = ""
    threads: int = 0  # 0 = leave the BLAS pool alone


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(raw: str, target_type):
    raw = raw.strip()
    if target_type is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    try:
        return target_type(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value {raw!r}: {exc}") from None


def dump_config(cfg: RunConfig) -> str:
    lines = [f"{f.name} = {_format_value(getattr(cfg, f.name))}" for f in fields(cfg)]
    return "\n".join(lines) + "\n"


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = dataclasses.replace(base) if base is not None else RunConfig()
    by_name = {f.name: f.type for f in fields(RunConfig)}
    types = {f.name: type(getattr(cfg, f.name)) for f in fields(RunConfig)}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in by_name:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        setattr(cfg, key, _parse_value(raw, types[key]))
    return cfg


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), base)
