"""Flat key=value run configs with strict schemas.

Config files are line-oriented `key = value` text; `#` starts a comment.
Every command owns a schema (name -> type, default) and unknown keys are
rejected so a typo never silently falls back to a default.
"""

from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    """Invalid configuration value, key, or combination."""


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def read_config_file(path: str | Path) -> dict[str, str]:
    """Read raw key/value pairs, keeping values as strings."""
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in pairs:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        pairs[key] = value.strip()
    return pairs


def resolve(schema: dict[str, tuple[type, object]], pairs: dict[str, str],
            overrides: dict[str, object] | None = None) -> dict[str, object]:
    """Coerce raw pairs against a schema, apply overrides, reject unknown keys."""
    unknown = set(pairs) - set(schema)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    resolved: dict[str, object] = {}
    for key, (kind, default) in schema.items():
        if key in pairs:
            text = pairs[key]
            try:
                if kind is bool:
                    resolved[key] = _parse_bool(text)
                else:
                    resolved[key] = kind(text)
            except ConfigError:
                raise
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"config key {key!r}: cannot parse {text!r} as {kind.__name__}") from exc
        else:
            resolved[key] = default
    if overrides:
        unknown = set(overrides) - set(schema)
        if unknown:
            raise ConfigError(f"unknown override keys: {', '.join(sorted(unknown))}")
        for key, value in overrides.items():
            if value is not None:
                resolved[key] = value
    return resolved


def write_config_file(path: str | Path, resolved: dict[str, object]) -> None:
    """Persist a resolved config so a run can be reproduced from its output dir."""
    lines = [f"{key} = {resolved[key]}" for key in sorted(resolved)]
    Path(path).write_text("\n".join(lines) + "\n")
