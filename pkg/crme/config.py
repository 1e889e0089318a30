from __future__ import annotations

import copy
from dataclasses import fields, is_dataclass, replace
import json
import logging
from logging.handlers import RotatingFileHandler
import os
from pathlib import Path
from typing import Any, TypeVar

from .errors import ConfigError

LOG_FILE_NAME = "latest.log"

T = TypeVar("T")


def get_app_home() -> Path:
    env = os.environ.get("CRME_HOME")
    if env:
        return Path(env).expanduser()
    return Path.home() / ".crme"


def get_cache_dir() -> Path:
    env = os.environ.get("CRME_CACHE_DIR")
    if env:
        return Path(env).expanduser()
    return get_app_home() / "cache"


def get_log_dir() -> Path:
    return get_app_home() / "logs"


def configure_logging() -> logging.Logger:
    logger = logging.getLogger("crme")
    if logger.handlers:
        return logger

    logger.setLevel(logging.INFO)
    log_dir = get_log_dir()
    try:
        log_dir.mkdir(parents=True, exist_ok=True)
    except OSError:
        # Fall back to stderr only if log directory fails.
        logging.basicConfig(level=logging.INFO)
        return logger

    log_path = log_dir / LOG_FILE_NAME
    try:
        handler = RotatingFileHandler(log_path, maxBytes=1_000_000, backupCount=5)
    except OSError:
        logging.basicConfig(level=logging.INFO)
        return logger
    formatter = logging.Formatter("%(asctime)s %(levelname)s %(message)s")
    handler.setFormatter(formatter)
    logger.addHandler(handler)
    return logger


def load_json_config(path: Path) -> dict[str, Any]:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return data


def _parse_override_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    """Apply ``section.key=value`` overrides to a raw config mapping.

    Values are parsed as JSON when possible, so ``train.n_stop=5`` yields an
    int and ``eval.k_grid=[18,62]`` a list; anything else is kept as a string.
    """
    result = copy.deepcopy(data)
    malformed: list[str] = []
    for item in overrides:
        key, sep, raw = item.partition("=")
        key = key.strip()
        if not sep or not key:
            malformed.append(item)
            continue
        target = result
        parts = key.split(".")
        for part in parts[:-1]:
            node = target.get(part)
            if not isinstance(node, dict):
                node = {}
                target[part] = node
            target = node
        target[parts[-1]] = _parse_override_value(raw)
    if malformed:
        raise ConfigError("overrides must look like section.key=value", malformed)
    return result


def _coerce_sequence(template: tuple[Any, ...], value: list[Any], path: str, unknown: list[str]) -> tuple[Any, ...]:
    if template and is_dataclass(template[0]):
        item_cls = type(template[0])
        items = []
        for idx, item in enumerate(value):
            if not isinstance(item, dict):
                raise ConfigError("expected an object", [f"{path}[{idx}]"])
            items.append(_build(item_cls, item, f"{path}[{idx}].", unknown))
        return tuple(items)
    return tuple(tuple(item) if isinstance(item, list) else item for item in value)


def _build(cls: type[T], data: dict[str, Any], prefix: str, unknown: list[str]) -> T:
    base = cls()
    known = {f.name for f in fields(cls) if f.init}
    updates: dict[str, Any] = {}
    for key, value in data.items():
        path = f"{prefix}{key}"
        if key not in known:
            unknown.append(path)
            continue
        current = getattr(base, key)
        if is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError("expected an object", [path])
            updates[key] = _build(type(current), value, f"{path}.", unknown)
        elif isinstance(current, tuple) and isinstance(value, list):
            updates[key] = _coerce_sequence(current, value, path, unknown)
        else:
            updates[key] = value
    if unknown:
        return base
    try:
        return replace(base, **updates)
    except (TypeError, ValueError) as exc:
        section = prefix.rstrip(".") or "config"
        raise ConfigError(f"invalid {section}: {exc}", [section]) from exc


def dataclass_from_dict(cls: type[T], data: dict[str, Any]) -> T:
    """Build a (possibly nested) config dataclass, rejecting unknown keys."""
    unknown: list[str] = []
    result = _build(cls, data, "", unknown)
    if unknown:
        raise ConfigError("unknown config keys", unknown)
    return result


def overridable_keys(instance: Any, prefix: str = "") -> list[str]:
    keys: list[str] = []
    for f in fields(instance):
        if not f.init:
            continue
        value = getattr(instance, f.name)
        path = f"{prefix}{f.name}"
        if is_dataclass(value):
            keys.extend(overridable_keys(value, f"{path}."))
        else:
            keys.append(f"{path}={json.dumps(_jsonable(value))}")
    return keys


def _jsonable(value: Any) -> Any:
    if is_dataclass(value):
        return {f.name: _jsonable(getattr(value, f.name)) for f in fields(value) if f.init}
    if isinstance(value, (list, tuple)):
        return [_jsonable(item) for item in value]
    if isinstance(value, Path):
        return str(value)
    return value


def config_to_dict(instance: Any) -> dict[str, Any]:
    return _jsonable(instance)
