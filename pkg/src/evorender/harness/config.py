"""Flat key=value experiment configuration.

Lines are `dotted.key=value`; blank lines and `#` comments are ignored.
Values keep their string form until read through the typed getters, so a
config round-trips byte-for-byte through format_config.
"""

from __future__ import annotations


class ConfigError(ValueError):
    pass


class Config:
    def __init__(self, pairs=None):
        self._pairs = dict(pairs or {})

    def __contains__(self, key):
        return key in self._pairs

    def __eq__(self, other):
        return isinstance(other, Config) and self._pairs == other._pairs

    def keys(self):
        return self._pairs.keys()

    def set(self, key, value):
        self._pairs[str(key)] = str(value)

    def get(self, key, default=None):
        if key not in self._pairs:
            if default is None:
                raise ConfigError(f"missing config key '{key}'")
            return default
        return self._pairs[key]

    def get_int(self, key, default=None):
        v = self.get(key, None if default is None else str(default))
        try:
            return int(v)
        except ValueError:
            raise ConfigError(f"config key '{key}' is not an integer: {v!r}")

    def get_float(self, key, default=None):
        v = self.get(key, None if default is None else repr(float(default)))
        try:
            return float(v)
        except ValueError:
            raise ConfigError(f"config key '{key}' is not a number: {v!r}")

    def get_bool(self, key, default=None):
        v = self.get(key, None if default is None else ("true" if default else "false"))
        low = v.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"config key '{key}' is not a boolean: {v!r}")


def parse_config(text) -> Config:
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        pairs[key] = value.strip()
    return Config(pairs)


def load_config(path) -> Config:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as e:
        raise ConfigError(f"cannot read config '{path}': {e}")


def format_config(cfg: Config) -> str:
    return "".join(f"{k}={cfg.get(k)}\n" for k in sorted(cfg.keys()))
