"""Run configuration: INI file with [corpus], [fbank], [train] and [eval] sections.

Precedence, lowest first: dataclass defaults, the config file, the CAT_SEED
environment variable, then ``--key value`` command-line overrides.  A bare
key names a field in whichever sections define it (``seed`` lives in both
corpus and train); ``section.key`` targets one section.
"""

from __future__ import annotations

import configparser
import os
import typing
from dataclasses import dataclass, field, fields

from .data import FbankConfig, SynthCorpusConfig
from .train import TrainConfig

__all__ = ["ConfigError", "EvalSettings", "RunConfig", "load_run_config", "parse_overrides"]


class ConfigError(ValueError):
    pass


@dataclass
class EvalSettings:
    metrics: list[str] = field(default_factory=lambda: ["eer", "topn"])
    topn: list[int] = field(default_factory=lambda: [1, 5, 10])
    partition: str = "test"
    threads: int = 1


@dataclass
class RunConfig:
    corpus: SynthCorpusConfig = field(default_factory=SynthCorpusConfig)
    fbank: FbankConfig = field(default_factory=FbankConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)

    def sections(self) -> dict:
        return {"corpus": self.corpus, "fbank": self.fbank, "train": self.train, "eval": self.eval}

    def set(self, key: str, raw: str) -> None:
        """Assign ``raw`` (a string) to ``section.key`` or to every section defining ``key``."""
        secs = self.sections()
        if "." in key:
            sec, name = key.split(".", 1)
            if sec not in secs:
                raise ConfigError(f"unknown config section {sec!r}")
            targets = [sec] if name in _field_types(secs[sec]) else []
        else:
            name = key
            targets = [s for s, obj in secs.items() if name in _field_types(obj)]
        if not targets:
            raise ConfigError(f"unknown config key {key!r}")
        for sec in targets:
            obj = secs[sec]
            setattr(obj, name, _convert(_field_types(obj)[name], raw, f"{sec}.{name}"))


def _field_types(obj) -> dict:
    hints = typing.get_type_hints(type(obj))
    return {f.name: hints[f.name] for f in fields(obj)}


def _convert(tp, raw: str, where: str):
    raw = raw.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    try:
        if origin is list:
            items = [s.strip() for s in raw.split(",") if s.strip()]
            return [_convert(args[0], s, where) for s in items]
        if origin is typing.Union or (origin is not None and type(None) in args):
            if raw.lower() in ("", "none"):
                return None
            return _convert(next(a for a in args if a is not type(None)), raw, where)
        if tp is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {getattr(tp, '__name__', tp)}") from None


def parse_overrides(tokens: list[str]) -> list[tuple[str, str]]:
    """``['--epochs', '3', '--train.lr=0.1']`` -> ``[('epochs', '3'), ('train.lr', '0.1')]``."""
    out = []
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or tok == "--":
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"missing value for {tok}")
            i += 1
            value = tokens[i]
        out.append((key.replace("-", "_"), value))
        i += 1
    return out


def load_run_config(path=None, overrides=(), env=None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str  # keep key case
        with open(path) as fh:
            parser.read_file(fh)
        for sec in parser.sections():
            if sec not in cfg.sections():
                raise ConfigError(f"{path}: unknown config section [{sec}]")
            for key, value in parser.items(sec):
                cfg.set(f"{sec}.{key}", value)
    env = os.environ if env is None else env
    if env.get("CAT_SEED", "").strip():
        cfg.set("seed", env["CAT_SEED"])
    for key, value in overrides:
        cfg.set(key, value)
    cfg.corpus.validate()
    cfg.train.validate()
    return cfg
