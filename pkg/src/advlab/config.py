"""Flat ``key = value`` configuration files.

One assignment per line, ``#`` starts a comment, dotted keys nest::

    seed = 0
    attack.pgd.steps = 10     # becomes {"attack": {"pgd": {"steps": 10}}}

Values are parsed as int, float, bool (true/false), comma lists or plain
strings, in that order.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any


class ConfigError(ValueError):
    pass


def _scalar(text: str) -> Any:
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_value(text: str) -> Any:
    text = text.strip()
    if "," in text:
        return [_scalar(p.strip()) for p in text.split(",") if p.strip()]
    return _scalar(text)


def parse_flat(text: str, source: str = "<config>") -> dict[str, Any]:
    """Return ``{dotted_key: value}`` preserving file order; later keys win."""
    flat: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        if any(not part for part in key.split(".")):
            raise ConfigError(f"{source}:{lineno}: malformed key {key!r}")
        flat[key] = parse_value(value)
    return flat


def nest(flat: dict[str, Any]) -> dict[str, Any]:
    tree: dict[str, Any] = {}
    for key, value in flat.items():
        node = tree
        *parents, leaf = key.split(".")
        for p in parents:
            child = node.setdefault(p, {})
            if not isinstance(child, dict):
                raise ConfigError(f"key {key!r} nests under the scalar {p!r}")
            node = child
        if isinstance(node.get(leaf), dict):
            raise ConfigError(f"key {key!r} is both a value and a section")
        node[leaf] = value
    return tree


def flatten(tree: dict[str, Any], prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def load_config(path, overrides: dict[str, Any] | None = None) -> dict[str, Any]:
    with open(path, encoding="utf-8") as fh:
        flat = parse_flat(fh.read(), str(path))
    flat.update(overrides or {})
    return nest(flat)


def config_hash(tree: dict[str, Any]) -> str:
    """SHA-256 over the sorted flattened items; insensitive to key order."""
    canonical = json.dumps(sorted(flatten(tree).items()), separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def as_list(value) -> list:
    if value is None or value == "":
        return []
    return list(value) if isinstance(value, (list, tuple)) else [value]
