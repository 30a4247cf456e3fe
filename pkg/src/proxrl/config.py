"""Build frozen config dataclasses from nested JSON-like dicts."""
from __future__ import annotations

import dataclasses
import typing
from enum import Enum

from .errors import ConfigurationError


class UnknownKeyError(ConfigurationError):
    def __init__(self, path: str):
        super().__init__(f"unknown configuration key: {path}")
        self.path = path


def _dataclass_type(tp):
    """Return the dataclass inside ``tp`` (handles ``X | None``), or None."""
    if dataclasses.is_dataclass(tp):
        return tp
    for arg in typing.get_args(tp):
        if dataclasses.is_dataclass(arg):
            return arg
    return None


def from_dict(cls, data: dict, path: str = ""):
    """Instantiate ``cls`` from ``data``; unknown keys raise :class:`UnknownKeyError`."""
    if isinstance(data, cls):
        return data
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path or cls.__name__}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if key not in names:
            raise UnknownKeyError(where)
        sub = _dataclass_type(hints.get(key))
        if sub is not None and isinstance(value, dict):
            value = from_dict(sub, value, where)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(f"{path or cls.__name__}: {exc}") from exc


def to_dict(obj):
    """JSON-ready view of a (nested) dataclass."""
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    if isinstance(obj, dict):
        return {k: to_dict(v) for k, v in obj.items()}
    return obj


def set_dotted(tree: dict, dotted: str, value) -> None:
    """``set_dotted(d, "a.b", 1)`` assigns ``d["a"]["b"] = 1``, creating levels as needed."""
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        nxt = node.get(k)
        if nxt is None:
            nxt = node[k] = {}
        elif not isinstance(nxt, dict):
            raise ConfigurationError(f"cannot set {dotted}: {k} is not an object")
        node = nxt
    node[keys[-1]] = value
