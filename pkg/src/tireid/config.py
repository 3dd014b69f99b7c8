"""Run configuration: one TOML file, flag overrides win.

Unknown keys are rejected up front so typos fail loudly instead of
silently falling back to defaults. Every randomized command requires a
seed, either here or on the command line.
"""

from __future__ import annotations

import sys
from pathlib import Path

from .errors import ValidationError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

_SCHEMA: dict[str, set[str]] = {
    "": {"seed"},
    "paths": {"annotations", "image_embeddings", "text_embeddings", "out"},
    "thi": {
        "rounds",
        "xi",
        "lambda",
        "candidate_size",
        "max_inflight",
        "pin_literal_top1",
        "unconditional_localization",
    },
    "oracle": {
        "backend",
        "endpoint",
        "model",
        "api_key_env",
        "template_dir",
        "script",
        "p",
        "beta",
        "word_cap",
        "timeout",
        "max_retries",
    },
    "embedder": {"endpoint", "model", "api_key_env", "refined_embeddings"},
    "rda": {"m", "per_text_count", "n_l"},
}


def load_run_config(path: str | Path | None) -> dict:
    """Parse and validate a TOML config file; None means empty config."""
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError(f"{path}: invalid TOML: {exc}")
    for key, value in doc.items():
        if isinstance(value, dict):
            if key not in _SCHEMA or key == "":
                raise ValidationError(f"{path}: unknown config section [{key}]")
            unknown = set(value) - _SCHEMA[key]
            if unknown:
                raise ValidationError(
                    f"{path}: unknown keys in [{key}]: {sorted(unknown)}"
                )
        elif key not in _SCHEMA[""]:
            raise ValidationError(f"{path}: unknown top-level key {key!r}")
    return doc


def config_get(config: dict, section: str, key: str, default=None):
    if section == "":
        return config.get(key, default)
    return config.get(section, {}).get(key, default)
