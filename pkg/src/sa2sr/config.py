"""Flat ``key = value`` configuration files with ``#`` comments.

Values stay strings here; commands coerce them against their own typed
key registries so that defaults, the config file, and command-line flags
layer cleanly (later layers win).
"""

from __future__ import annotations

from pathlib import Path


def parse_kv_file(path) -> dict[str, str]:
    out: dict[str, str] = {}
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{line_no}: expected 'key = value', got {line!r}")
        key, value = stripped.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def format_kv(mapping: dict) -> str:
    return "\n".join(f"{k} = {mapping[k]}" for k in sorted(mapping)) + "\n"


def write_kv(path, mapping: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_kv(mapping), encoding="utf-8")


def coerce(value: str, kind: type):
    if kind is bool:
        lowered = str(value).strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"cannot read {value!r} as a boolean")
    return kind(value)


def layered(
    defaults: dict, file_values: dict[str, str], flag_values: dict, types: dict[str, type]
) -> dict:
    """defaults < config file < flags; unknown file keys are errors."""
    out = dict(defaults)
    for key, raw in file_values.items():
        if key not in types:
            raise ValueError(f"unknown config key {key!r}")
        out[key] = coerce(raw, types[key])
    for key, value in flag_values.items():
        if value is not None:
            out[key] = value
    return out
