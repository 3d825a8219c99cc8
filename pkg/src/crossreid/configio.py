"""Flat ``key = value`` config files, one section per subsystem.

The format is INI-like on purpose: diffable, greppable, and parseable
without dependencies.  Unknown sections or keys are fatal so typos never
get silently absorbed.
"""

from __future__ import annotations

import configparser
import io
from typing import Any


class ConfigError(ValueError):
    """Raised for malformed config text, unknown keys, or bad values."""


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {raw!r}")


def _parse_int_list(raw: str) -> tuple[int, ...]:
    raw = raw.strip()
    if not raw:
        return ()
    try:
        return tuple(int(tok) for tok in raw.split(","))
    except ValueError as exc:
        raise ConfigError(f"not a comma-separated int list: {raw!r}") from exc


_PARSERS = {
    "int": int,
    "float": float,
    "bool": _parse_bool,
    "str": lambda s: s.strip(),
    "ints": _parse_int_list,
}

# section -> key -> (type name, default). The defaults are the toy-scale
# configuration; height/width and channel widths follow the small profile.
SCHEMA: dict[str, dict[str, tuple[str, Any]]] = {
    "dataset": {
        "height": ("int", 64),
        "width": ("int", 32),
        "num_identities": ("int", 20),
        "images_per_id_per_cam": ("int", 4),
        "cameras": ("int", 2),
        "seen_rates": ("ints", (2, 3, 4)),
        "unseen_rates": ("ints", (8,)),
        "seed": ("int", 0),
    },
    "network": {
        "channels": ("ints", (16, 32, 64, 128, 256)),
        "strides": ("ints", (2, 2, 2, 2, 1)),
        "align_levels": ("ints", (1, 2)),
        "embed": ("str", "joint"),
    },
    "train": {
        "lr_main": ("float", 1e-3),
        "momentum": ("float", 0.9),
        "weight_decay": ("float", 5e-4),
        "lr_disc": ("float", 1e-4),
        "disc_momentum": ("float", 0.9),
        "disc_weight_decay": ("float", 0.0),
        "batch_p": ("int", 4),
        "batch_k": ("int", 2),
        "iterations": ("int", 1000),
        "inner_crgan_steps": ("int", 1),
        "inner_disc_steps": ("int", 1),
        "eval_every": ("int", 0),
        "checkpoint_every": ("int", 0),
        "deterministic": ("bool", True),
        "label_percent": ("float", 100.0),
        "seed": ("int", 0),
    },
    "loss": {
        "lambda_adv_f": ("float", 1.0),
        "lambda_rec": ("float", 1.0),
        "lambda_adv_i": ("float", 1.0),
        "lambda_consist": ("float", 1.0),
        "margin": ("float", 2.0),
        "dedup_image_real": ("bool", False),
    },
}


def default_settings() -> dict[str, dict[str, Any]]:
    """Fully-defaulted settings tree (deep-copied per call)."""
    return {sec: {k: v for k, (_t, v) in keys.items()} for sec, keys in SCHEMA.items()}


def parse_settings(text: str) -> dict[str, dict[str, Any]]:
    """Parse config text into a typed settings tree.

    Missing keys fall back to defaults; unknown sections/keys raise
    ConfigError.
    """
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc

    settings = default_settings()
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in cp.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown config key '{key}' in section [{section}]")
            type_name, _default = SCHEMA[section][key]
            try:
                settings[section][key] = _PARSERS[type_name](raw)
            except ConfigError:
                raise
            except (TypeError, ValueError) as exc:
                raise ConfigError(
                    f"bad value for [{section}] {key}: {raw!r} ({exc})"
                ) from exc
    return settings


def load_settings(path) -> dict[str, dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_settings(fh.read())


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return str(value)


def serialize_settings(settings: dict[str, dict[str, Any]]) -> str:
    """Render a settings tree back to canonical config text."""
    out = io.StringIO()
    for section in SCHEMA:
        if section not in settings:
            continue
        out.write(f"[{section}]\n")
        for key in SCHEMA[section]:
            if key in settings[section]:
                out.write(f"{key} = {format_value(settings[section][key])}\n")
        out.write("\n")
    return out.getvalue()
