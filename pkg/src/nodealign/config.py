"""INI-style experiment configs.

Two sections are recognised::

    [train]            # TrainConfig fields: lambda1, lr, epochs, stats_epochs, k, m, ood_p, ...
    [data]             # SynthConfig fields: num_classes, channels, tau, label_noise, ...

Values are parsed as Python literals where possible (``0.1``, ``true``,
``none``, ``1.5, 1.2, ...`` for per-channel lists). Any key left out keeps its
default. Errors carry the offending file line.
"""

from __future__ import annotations

import configparser
import dataclasses
import re
from pathlib import Path
from typing import Any, get_args, get_origin, get_type_hints

from .synthdata import SynthConfig
from .trainer import TrainConfig

SECTIONS = {"train": TrainConfig, "data": SynthConfig}


class ConfigError(ValueError):
    def __init__(self, message: str, path=None, line: int | None = None):
        where = f"{path}:{line}: " if path is not None and line else (f"{path}: " if path else "")
        super().__init__(where + message)
        self.line = line


def _line_of(text: str, section: str, key: str) -> int | None:
    current = None
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        m = re.match(r"\[(.+)\]", line)
        if m:
            current = m.group(1).strip()
            continue
        if current == section and re.match(rf"{re.escape(key)}\s*[=:]", line, re.IGNORECASE):
            return i
    return None


def _parse_value(raw: str, hint) -> Any:
    s = raw.strip()
    low = s.lower()
    kinds = [a for a in (get_args(hint) or (hint,)) if a is not type(None)]
    if low in ("none", "null"):
        if len(kinds) < len(get_args(hint) or (hint,)):
            return None
        raise ValueError("value may not be none")
    if bool in kinds:
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"expected a boolean, got {s!r}")
    if "," in s:
        if not any(get_origin(k) is tuple for k in kinds):
            raise ValueError(f"a list is not allowed here: {s!r}")
        return tuple(float(p) for p in s.split(","))
    if int in kinds and float not in kinds:
        if re.fullmatch(r"[+-]?\d+", s):
            return int(s)
        raise ValueError(f"expected an integer, got {s!r}")
    try:
        return float(s)
    except ValueError:
        raise ValueError(f"expected a number, got {s!r}") from None


def _apply(obj, section: str, items: dict[str, str], text: str, path) -> None:
    hints = get_type_hints(type(obj))
    names = {f.name for f in dataclasses.fields(obj)} - {"data"}
    for key, raw in items.items():
        line = _line_of(text, section, key)
        if key not in names:
            raise ConfigError(f"unknown key {key!r} in [{section}]", path, line)
        try:
            setattr(obj, key, _parse_value(raw, hints[key]))
        except ValueError as exc:
            raise ConfigError(f"{section}.{key}: {exc}", path, line) from None


def parse_config(text: str, path=None) -> TrainConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=str(path or "<config>"))
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(str(exc).splitlines()[0], path, line) from None
    cfg = TrainConfig()
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]", path, _section_line(text, section))
        target = cfg if section == "train" else cfg.data
        _apply(target, section, dict(parser.items(section)), text, path)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(f"invalid configuration: {exc}", path, _guess_line(text, str(exc))) from None
    return cfg


def _section_line(text: str, section: str) -> int | None:
    for i, raw in enumerate(text.splitlines(), start=1):
        if raw.strip() == f"[{section}]":
            return i
    return None


def _guess_line(text: str, message: str) -> int | None:
    # point validation errors at the first key the message names
    for section, cls in SECTIONS.items():
        for f in dataclasses.fields(cls):
            if re.search(rf"\b{f.name}\b", message):
                line = _line_of(text, section, f.name)
                if line:
                    return line
    return None


def load_config(path) -> TrainConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", path) from None
    return parse_config(text, p)


def set_param(cfg: TrainConfig, name: str, value: str) -> None:
    """Set ``name`` (a train or data field) from its string form."""
    for section, obj in (("train", cfg), ("data", cfg.data)):
        names = {f.name for f in dataclasses.fields(obj)} - {"data"}
        if name in names:
            hints = get_type_hints(type(obj))
            try:
                setattr(obj, name, _parse_value(value, hints[name]))
            except ValueError as exc:
                raise ConfigError(f"{name}: {exc}") from None
            return
    raise ConfigError(f"unknown parameter {name!r}")


def dump_config(cfg: TrainConfig) -> str:
    lines = ["[train]"]
    for f in dataclasses.fields(cfg):
        if f.name != "data":
            lines.append(f"{f.name} = {_fmt(getattr(cfg, f.name))}")
    lines.append("")
    lines.append("[data]")
    for f in dataclasses.fields(cfg.data):
        lines.append(f"{f.name} = {_fmt(getattr(cfg.data, f.name))}")
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(repr(float(x)) for x in v)
    return repr(v) if isinstance(v, float) else str(v)
