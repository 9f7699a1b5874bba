"""Run configuration files (TOML) with sections ``model``, ``train``, ``loss`` and ``synth``."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import tomli

from tokenreg.model import ModelConfig
from tokenreg.objective import LossConfig
from tokenreg.synthgen import SynthConfig
from tokenreg.trainer import TrainConfig


class ConfigFileError(ValueError):
    pass


# the loss weight lives in [loss]; TrainConfig.lam is filled from it
_EXCLUDED = {"train": {"lam"}}
_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "loss": LossConfig, "synth": SynthConfig}
_TRIPLES = {"dims", "size"}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def __post_init__(self):
        if self.train.lam != self.loss.lam:
            object.__setattr__(self, "train", replace(self.train, lam=self.loss.lam))

    def with_overrides(self, section: str, **values) -> "RunConfig":
        """Copy with ``values`` replacing fields of ``section`` (``None`` values are ignored)."""
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        current = getattr(self, section)
        try:
            updated = replace(current, **values)
        except (TypeError, ValueError) as exc:
            raise ConfigFileError(f"{_field_path(section, exc)}: {exc}") from None
        return replace(self, **{section: updated})

    def to_toml(self) -> str:
        lines = []
        for name in _SECTIONS:
            lines.append(f"[{name}]")
            for f in fields(getattr(self, name)):
                if f.name in _EXCLUDED.get(name, ()):
                    continue
                lines.append(f"{f.name} = {_toml_value(getattr(getattr(self, name), f.name))}")
            lines.append("")
        return "\n".join(lines)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, str):
        return json.dumps(v)
    return repr(v)


def _check_type(path: str, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
        kind = "a boolean"
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
        kind = "an integer"
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        kind = "a number"
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
        kind = "a string"
    else:
        ok, kind = True, ""
    if not ok:
        raise ConfigFileError(f"{path}: expected {kind}, got {value!r}")
    return value


def _build_section(name: str, table) -> object:
    cls = _SECTIONS[name]
    if not isinstance(table, dict):
        raise ConfigFileError(f"{name}: expected a table")
    defaults = cls()
    allowed = {f.name for f in fields(cls)} - _EXCLUDED.get(name, set())
    values = {}
    for key, value in table.items():
        path = f"{name}.{key}"
        if key not in allowed:
            raise ConfigFileError(f"{path}: unknown key")
        if key in _TRIPLES:
            if not (isinstance(value, list) and len(value) == 3 and all(isinstance(x, int) for x in value)):
                raise ConfigFileError(f"{path}: expected three integers [x, y, z], got {value!r}")
            value = tuple(value)
        else:
            value = _check_type(path, value, getattr(defaults, key))
        values[key] = value
    try:
        return cls(**values)
    except ValueError as exc:
        raise ConfigFileError(f"{_field_path(name, exc)}: {exc}") from None


def _field_path(section: str, exc: Exception) -> str:
    """Best-effort ``section.field`` for a dataclass validation message."""
    text = str(exc)
    for f in fields(_SECTIONS[section]):
        if text.startswith(f.name):
            return f"{section}.{f.name}"
    return section


def parse_config(doc: dict) -> RunConfig:
    unknown = set(doc) - set(_SECTIONS)
    if unknown:
        raise ConfigFileError(f"{sorted(unknown)[0]}: unknown section")
    return RunConfig(**{name: _build_section(name, doc[name]) for name in _SECTIONS if name in doc})


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            doc = tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise ConfigFileError(f"{path}: {exc}") from None
    return parse_config(doc)


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(cfg.to_toml(), encoding="utf-8")


__all__ = ["ConfigFileError", "RunConfig", "dump_config", "load_config", "parse_config"]
