"""Flat key=value run configuration: INI-style sections, every key mirrored by
a CLI flag, flags overriding the file."""

from __future__ import annotations

import configparser
from pathlib import Path


class ConfigError(ValueError):
    pass


class Config:
    """Flattened "section.key" -> string store with typed getters."""

    def __init__(self, values: dict[str, str] | None = None):
        self.values: dict[str, str] = dict(values or {})

    @classmethod
    def load(cls, path: str | None) -> "Config":
        if path is None:
            return cls()
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        return cls.parse(p.read_text(encoding="utf-8"))

    @classmethod
    def parse(cls, text: str) -> "Config":
        cfg = cls()
        parser = configparser.ConfigParser(interpolation=None)
        parser.read_string(text)
        for section in parser.sections():
            for key, value in parser.items(section):
                cfg.values[f"{section}.{key}"] = value
        return cfg

    def override(self, key: str, value) -> None:
        if value is not None:
            self.values[key] = str(value)

    def get_str(self, key: str, default: str | None = None) -> str | None:
        return self.values.get(key, default)

    def get_int(self, key: str, default: int | None = None) -> int | None:
        raw = self.values.get(key)
        if raw is None:
            return default
        try:
            return int(raw)
        except ValueError as e:
            raise ConfigError(f"{key} must be an integer, got {raw!r}") from e

    def get_float(self, key: str, default: float | None = None) -> float | None:
        raw = self.values.get(key)
        if raw is None:
            return default
        try:
            return float(raw)
        except ValueError as e:
            raise ConfigError(f"{key} must be a number, got {raw!r}") from e

    def get_bool(self, key: str, default: bool = False) -> bool:
        raw = self.values.get(key)
        if raw is None:
            return default
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key} must be a boolean, got {raw!r}")

    def to_text(self) -> str:
        """Render back to INI text (sections sorted, keys in insertion order)."""
        sections: dict[str, list[tuple[str, str]]] = {}
        for full, value in self.values.items():
            section, _, key = full.partition(".")
            sections.setdefault(section, []).append((key, value))
        lines = []
        for section in sorted(sections):
            lines.append(f"[{section}]")
            for key, value in sections[section]:
                lines.append(f"{key} = {value}")
            lines.append("")
        return "\n".join(lines)
