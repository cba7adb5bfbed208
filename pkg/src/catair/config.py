"""Plain-text run configuration: ``[section]`` headers and ``key = value`` lines.

Example::

    [model]
    channels = 16
    enc_blocks = 2, 4, 4, 4
    tasks = denoise, derain, dehaze

    [train]
    steps = 500
    lr = 2e-4

    [data]
    counts = denoise:8, derain:8, dehaze:8

Blank lines and lines starting with ``#`` or ``;`` are ignored. Unknown sections
or keys raise :class:`ConfigFileError` carrying the offending line number.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from ._validation import ConfigError
from .backbone import ModelConfig


class ConfigFileError(ConfigError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


def _int_list(s):
    return tuple(int(x) for x in s.split(",") if x.strip())


def _str_list(s):
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _mapping(cast):
    def parse(s):
        out = {}
        for item in _str_list(s):
            key, sep, value = item.partition(":")
            if not sep:
                raise ValueError(f"expected name:value, got {item!r}")
            out[key.strip()] = cast(value)
        return out
    return parse


SCHEMA = {
    "model": {
        "channels": int, "enc_blocks": _int_list, "dec_blocks": _int_list, "window": int, "tau": float,
        "gamma0": float, "bottleneck_heads": int, "tasks": _str_list, "prompt_size": int, "kernel": int,
        "router_temperature": float, "global_channels": int,
    },
    "train": {
        "steps": int, "lr": float, "batch_size": int, "crop": int, "use_ema": _bool, "ema_beta": float,
        "seed": int, "log_every": int,
    },
    "data": {
        "size": int, "seed": int, "counts": _mapping(int), "weights": _mapping(float), "total": int,
        "workers": int, "prefix": str,
    },
    "extend": {
        "new_tasks": _str_list, "lr_prompt_multiplier": float, "mix_weights": _mapping(float),
        "ema_beta": float,
    },
    "eval": {"gamma": float},
}


@dataclass
class RunConfig:
    sections: dict = field(default_factory=lambda: {name: {} for name in SCHEMA})

    def get(self, section, key, default=None):
        return self.sections.get(section, {}).get(key, default)

    def set(self, section, key, raw):
        """Set a value from its string form (used for command-line overrides)."""
        if section not in SCHEMA:
            raise ConfigFileError(f"unknown section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigFileError(f"unknown key {key!r} in [{section}]")
        try:
            self.sections[section][key] = SCHEMA[section][key](raw) if isinstance(raw, str) else raw
        except ValueError as exc:
            raise ConfigFileError(f"bad value for {section}.{key}: {exc}") from None

    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.sections["model"])

    def to_text(self):
        def fmt(v):
            if isinstance(v, dict):
                return ", ".join(f"{k}:{x}" for k, x in v.items())
            if isinstance(v, (tuple, list)):
                return ", ".join(str(x) for x in v)
            return str(v)
        lines = []
        for name, values in self.sections.items():
            if values:
                lines.append(f"[{name}]")
                lines += [f"{k} = {fmt(v)}" for k, v in values.items()]
                lines.append("")
        return "\n".join(lines)


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigFileError(f"malformed section header {line!r}", lineno)
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigFileError(f"unknown section [{section}]", lineno)
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigFileError(f"expected 'key = value', got {line!r}", lineno)
        if section is None:
            raise ConfigFileError("key outside of any [section]", lineno)
        key = key.strip()
        if key not in SCHEMA[section]:
            raise ConfigFileError(f"unknown key {key!r} in [{section}]", lineno)
        try:
            cfg.sections[section][key] = SCHEMA[section][key](value.strip())
        except ValueError as exc:
            raise ConfigFileError(f"bad value for {key!r}: {exc}", lineno) from None
    return cfg


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    return parse_config(Path(path).read_text())
