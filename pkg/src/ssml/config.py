"""Text configuration files and their mapping onto the library's config objects.

A config file is INI-style, one section per component::

    [data]
    path = subjects.mshd        ; or synthetic-generator keys such as noise_sd
    [model]
    kind = MLP
    [meta]
    max_epochs = 10
    [adapt]
    epsilon = 0.9
    [experiment]
    shots = 1, 3, 5, 10
    seeds = 0, 1, 2

Every key can also be given on the command line as ``--<section>-<key>``
(underscores become dashes); command-line values win.
"""

from __future__ import annotations

import configparser
import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .adapt import AdaptConfig
from .backbones import ModelSpec
from .data import SynthConfig
from .harness import METHODS, ExperimentConfig
from .meta import MetaConfig


@dataclass
class ExperimentSection:
    methods: tuple[str, ...] = METHODS
    shots: tuple[int, ...] = (1, 3, 5, 10)
    seeds: tuple[int, ...] = (0,)
    targets: tuple[int, ...] | None = None
    eval_fraction: float = 0.3
    jobs: int = 1


@dataclass(frozen=True)
class DataSection(SynthConfig):
    """Synthetic generator settings plus an optional dataset file that overrides them."""

    path: str | None = None


SECTIONS: dict[str, type] = {
    "data": DataSection,
    "model": ModelSpec,
    "meta": MetaConfig,
    "adapt": AdaptConfig,
    "experiment": ExperimentSection,
}


class ConfigError(ValueError):
    pass


def _parse(value: str, hint) -> object:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        inner = [a for a in args if a is not type(None)]
        if value.strip().lower() in ("", "none"):
            return None
        return _parse(value, inner[0])
    if origin in (tuple, list):
        item = args[0]
        parts = [p.strip() for p in value.split(",") if p.strip()]
        return tuple(_parse(p, item) for p in parts)
    if hint is bool:
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if hint in (int, float, str):
        return hint(value.strip())
    raise ConfigError(f"unsupported config type {hint}")


def field_types(cls: type) -> dict[str, object]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


@dataclass
class Settings:
    """Raw per-section overrides; missing keys fall back to the dataclass defaults."""

    values: dict[str, dict[str, object]] = field(default_factory=lambda: {s: {} for s in SECTIONS})

    def set(self, section: str, key: str, raw: str | object) -> None:
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]; expected one of {sorted(SECTIONS)}")
        hints = field_types(SECTIONS[section])
        if key not in hints:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        try:
            self.values[section][key] = _parse(raw, hints[key]) if isinstance(raw, str) else raw
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from None

    def build(self, section: str):
        cls = SECTIONS[section]
        try:
            return cls(**self.values[section])
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"invalid [{section}] settings: {exc}") from None

    def data(self) -> SynthConfig | str:
        d = self.build("data")
        if d.path:
            return d.path
        return SynthConfig(**{f.name: getattr(d, f.name) for f in dataclasses.fields(SynthConfig)})

    def experiment(self) -> tuple[ExperimentConfig, int]:
        ex = self.build("experiment")
        cfg = ExperimentConfig(data=self.data(), model=self.build("model"), meta=self.build("meta"),
                               adapt=self.build("adapt"), methods=ex.methods, shots=ex.shots, seeds=ex.seeds,
                               targets=ex.targets, eval_fraction=ex.eval_fraction)
        cfg.validate()
        return cfg, ex.jobs


def load_settings(path: str | Path | None) -> Settings:
    settings = Settings()
    if path is None:
        return settings
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    parser.optionxform = str  # keys are case-sensitive (meta.M)
    try:
        read = parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    for section in parser.sections():
        for key, value in parser.items(section):
            settings.set(section, key, value)
    return settings
