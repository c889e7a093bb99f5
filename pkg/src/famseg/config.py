"""INI-style experiment configuration.

Sections mirror the config dataclasses::

    [model]     dtype
    [encoder]   EncoderConfig fields
    [decoder]   DecoderConfig fields
    [schedule]  Schedule fields; phases = adamw:15:cosine, sgd:5:cosine
    [train]     seed, loss, shards
    [phantom]   PhantomSpec fields

Every key is optional. Tuples are comma separated. Unknown sections or keys
are rejected with the line they appear on.
"""

from __future__ import annotations

import configparser
import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path

from .data import PhantomSpec
from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .model import ModelConfig
from .optim import Phase, Schedule
from .train import TrainConfig


class ConfigError(ValueError):
    def __init__(self, message, source="<config>", line=None):
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")
        self.line = line


@dataclass
class Experiment:
    train: TrainConfig = field(default_factory=TrainConfig)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    text: str = ""


SECTIONS = {
    "model": ModelConfig,
    "encoder": EncoderConfig,
    "decoder": DecoderConfig,
    "schedule": Schedule,
    "train": TrainConfig,
    "phantom": PhantomSpec,
}
_NESTED = {"model": {"encoder", "decoder"}, "train": {"model", "schedule"}}
_BOOL = {"1": True, "yes": True, "true": True, "on": True, "0": False, "no": False, "false": False, "off": False}


def _allowed(section):
    names = {f.name for f in dataclasses.fields(SECTIONS[section])}
    return names - _NESTED.get(section, set())


def _key_lines(text):
    """Map ``(section, key)`` to the line it is defined on."""
    lines, section = {}, None
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = re.match(r"\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            lines[(section, None)] = no
            continue
        key = re.split(r"[=:]", line, maxsplit=1)[0].strip().lower()
        lines.setdefault((section, key), no)
    return lines


def _parse_phase(item):
    parts = [p.strip() for p in item.split(":")]
    if len(parts) not in (2, 3):
        raise ValueError(f"phase {item!r} must look like optimizer:epochs[:decay]")
    return Phase(parts[0], int(parts[1]), *parts[2:])


def _convert(raw: str, default, name: str):
    raw = raw.strip()
    if name == "phases":
        return tuple(_parse_phase(p) for p in raw.split(",") if p.strip())
    if isinstance(default, bool):
        if raw.lower() not in _BOOL:
            raise ValueError(f"{raw!r} is not a boolean")
        return _BOOL[raw.lower()]
    if default is None:
        return None if raw.lower() == "none" else int(raw)
    if isinstance(default, tuple):
        kind = type(default[0]) if default else str
        return tuple(kind(v.strip()) for v in raw.split(",") if v.strip())
    return type(default)(raw)


def _defaults(cls):
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            out[f.name] = f.default_factory()
    return out


def parse_config(text: str, source: str = "<config>") -> Experiment:
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(str(e).splitlines()[0], source, getattr(e, "lineno", None)) from e
    lines = _key_lines(text)
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]", source, lines.get((section, None)))
        defaults = _defaults(SECTIONS[section])
        allowed = _allowed(section)
        values[section] = {}
        for key, raw in parser.items(section):
            line = lines.get((section, key))
            if key not in allowed:
                raise ConfigError(f"unknown key {key!r} in [{section}]", source, line)
            try:
                values[section][key] = _convert(raw, defaults[key], key)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"bad value for {key!r}: {e}", source, line) from e
    try:
        enc = EncoderConfig(**values.get("encoder", {}))
        dec = DecoderConfig(**values.get("decoder", {}))
        model = ModelConfig(enc, dec, **values.get("model", {}))
        sched = Schedule(**values.get("schedule", {}))
        train = TrainConfig(model, sched, **values.get("train", {}))
        phantom = PhantomSpec(**values.get("phantom", {}))
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e), source) from e
    if phantom.num_classes != dec.num_classes:
        raise ConfigError(f"phantom has {phantom.num_classes} classes but the decoder predicts {dec.num_classes}",
                          source)
    return Experiment(train, phantom, text)


def load_config(path) -> Experiment:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e.strerror}", str(path)) from e
    return parse_config(text, str(path))


def _format(value) -> str:
    if isinstance(value, tuple):
        if value and isinstance(value[0], Phase):
            return ", ".join(f"{p.optimizer}:{p.epochs}:{p.decay}" for p in value)
        return ", ".join(str(v) for v in value)
    return str(value)


def dump_config(exp: Experiment) -> str:
    """Every setting with its effective value, parseable by :func:`parse_config`."""
    t = exp.train
    objects = {"model": t.model, "encoder": t.model.encoder, "decoder": t.model.decoder, "schedule": t.schedule,
               "train": t, "phantom": exp.phantom}
    out = []
    for section, obj in objects.items():
        out.append(f"[{section}]")
        for f in dataclasses.fields(obj):
            if f.name in _allowed(section):
                value = getattr(obj, f.name)
                if section == "schedule" and f.name == "phases":
                    if any(p.lr_max is not None or p.lr_min is not None for p in value):
                        raise ConfigError("per-phase learning-rate overrides cannot be written to a config file")
                out.append(f"{f.name} = {_format(value)}")
        out.append("")
    return "\n".join(out)
