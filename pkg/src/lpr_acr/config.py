"""Plain-text ``key = value`` configuration with environment overrides.

Keys are option names with dashes or underscores (``grid-step`` and
``grid_step`` are the same key). Lines starting with ``#`` are comments.
Environment variables ``LPR_ACR_<KEY>`` (upper case, underscores) override the
file; command-line flags override both.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional

ENV_PREFIX = "LPR_ACR_"


class ConfigError(ValueError):
    pass


def normalize_key(key: str) -> str:
    return key.strip().lower().replace("-", "_")


def parse_config(text: str, source: str = "<config>") -> Dict[str, str]:
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = normalize_key(key)
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value.strip()
    return out


def read_config(path: str | Path) -> Dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))


def env_overrides(keys: Iterable[str], environ: Optional[Mapping[str, str]] = None) -> Dict[str, str]:
    environ = os.environ if environ is None else environ
    out = {}
    for key in keys:
        name = ENV_PREFIX + normalize_key(key).upper()
        if name in environ:
            out[normalize_key(key)] = environ[name]
    return out


def merged_defaults(
    known: Iterable[str],
    file_values: Mapping[str, str],
    environ: Optional[Mapping[str, str]] = None,
) -> Dict[str, str]:
    """File values overlaid with environment values, restricted to ``known`` keys.

    Unknown keys in the file are a configuration error.
    """
    known = {normalize_key(k) for k in known}
    unknown = sorted(set(file_values) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    merged = dict(file_values)
    merged.update(env_overrides(known, environ))
    return merged
