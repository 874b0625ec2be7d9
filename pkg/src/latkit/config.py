"""Line-based ``key = value`` configuration files.

Blank lines and lines starting with ``#`` are ignored. Values are kept as
strings until a typed getter asks for them.
"""

from __future__ import annotations

from latkit.errors import InputError
from latkit.mask import Box, MaskStrategy

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_config(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InputError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise InputError(f"config line {lineno}: empty key")
        out[key] = value
    return out


def read_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return "none"
    return str(value)


def dump_config(mapping: dict) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in mapping.items())


class Settings:
    """Typed view over a parsed config with defaults."""

    def __init__(self, values: dict | None = None):
        self.values = dict(values or {})

    def has(self, key: str) -> bool:
        return key in self.values and self.values[key].lower() != "none"

    def str(self, key: str, default=None):
        return self.values[key] if self.has(key) else default

    def int(self, key: str, default=None):
        if not self.has(key):
            return default
        try:
            return int(self.values[key])
        except ValueError:
            raise InputError(f"{key}: expected an integer, got {self.values[key]!r}") from None

    def float(self, key: str, default=None):
        if not self.has(key):
            return default
        try:
            return float(self.values[key])
        except ValueError:
            raise InputError(f"{key}: expected a number, got {self.values[key]!r}") from None

    def bool(self, key: str, default=False):
        if not self.has(key):
            return default
        v = self.values[key].lower()
        if v in _TRUE:
            return True
        if v in _FALSE:
            return False
        raise InputError(f"{key}: expected true/false, got {self.values[key]!r}")

    def list(self, key: str, sep: str = ","):
        if not self.has(key):
            return []
        return [part.strip() for part in self.values[key].split(sep) if part.strip()]


def parse_boxes(text: str) -> tuple:
    return tuple(Box.parse(part) for part in text.split(";") if part.strip())


def strategy_from_settings(s: Settings, kind: str | None = None, prefix: str = "") -> MaskStrategy:
    kind = kind or s.str(prefix + "strategy", "full")
    return MaskStrategy(
        kind=kind,
        epsilon=s.float(prefix + "epsilon", 0.3),
        fraction=s.float(prefix + "center_fraction", 0.5),
        boxes=parse_boxes(s.str(prefix + "boxes", "")),
        path=s.str(prefix + "mask_file"),
    )
