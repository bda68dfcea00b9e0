"""Run configuration files.

A config is a TOML file of flat ``section.key = value`` assignments, for
example::

    train.steps = 200
    train.log_wall_time = false
    model.prior = "previous"

Sections are ``task``, ``model``, ``train`` and ``gen``; every key and its
default is listed by :func:`arflow.training.config_fields`. ``[section]``
tables are accepted as well. Unknown keys are rejected by name.
"""

from __future__ import annotations

import sys

from .training import RunConfig, config_fields

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _unflatten(flat):
    nested = {}
    for key, v in flat.items():
        section, name = key.split(".", 1)
        nested.setdefault(section, {})[name] = v
    return nested


def _check_type(key, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"config key {key!r}: expected {type(default).__name__}, got {value!r}")
    return float(value) if isinstance(default, float) else value


def config_from_flat(flat, base=None):
    """Apply ``{"section.key": value}`` overrides on top of ``base`` (defaults if None)."""
    known = config_fields()
    current = _flatten((base or RunConfig()).to_dict())
    for key, value in flat.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        current[key] = _check_type(key, value, known[key])
    try:
        return RunConfig.from_dict(_unflatten(current))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def parse_config(text, base=None):
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    return config_from_flat(_flatten(data), base)


def load_config(path, base=None):
    """Read a config file; raises ``ConfigError`` naming the offending key."""
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        return parse_config(raw.decode("utf-8"), base)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def dump_config(cfg):
    """Flat TOML text that :func:`parse_config` reads back to ``cfg``."""
    lines = []
    for key, v in _flatten(cfg.to_dict()).items():
        if isinstance(v, bool):
            s = "true" if v else "false"
        elif isinstance(v, str):
            s = '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
        else:
            s = repr(v)
        lines.append(f"{key} = {s}")
    return "\n".join(lines) + "\n"
