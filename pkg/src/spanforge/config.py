"""INI-style run configuration: sections mirror the module configs, unknown keys are rejected.

Precedence is command-line flags > config file > built-in defaults; the seed
falls back to the ``SPANFORGE_SEED`` environment variable before the default.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .encoder import EncoderConfig
from .errors import ConfigError
from .evalkit import EvalConfig
from .finetune import FinetuneConfig


@dataclass
class TokenizerConfig:
    vocab: str = ""
    vocab_size: int = 256
    max_len: int = 384
    stride: int = 128


@dataclass
class DataConfig:
    train: str = ""
    val: str = ""
    train_fraction: float = 0.8


@dataclass
class PretrainConfig:
    steps: int = 200
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.01


@dataclass
class RunSection:
    seed: int = 0
    out_dir: str = "runs/latest"
    base: str = ""


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    run: RunSection = field(default_factory=RunSection)

    def sections(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _coerce(raw: str, default, where: str):
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from exc
    return raw


def _render(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


# input paths in a config file are relative to that file; out_dir stays relative to the working directory
_INPUT_PATHS = (("data", "train"), ("data", "val"), ("tokenizer", "vocab"), ("run", "base"))


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    cfg = RunConfig()
    sections = cfg.sections()
    for name in parser.sections():
        if name not in sections:
            raise ConfigError(f"{source}: unknown section [{name}]")
        target = sections[name]
        known = {f.name for f in fields(target)}
        for key, raw in parser.items(name):
            if key not in known:
                raise ConfigError(f"{source}: unknown key {key!r} in [{name}]")
            setattr(target, key, _coerce(raw, getattr(target, key), f"[{name}] {key}"))
    return cfg


def load_config(path=None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
    else:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = parse_config(text, str(path))
        root = Path(path).resolve().parent
        for section, key in _INPUT_PATHS:
            value = getattr(getattr(cfg, section), key)
            if value and not Path(value).is_absolute():
                setattr(getattr(cfg, section), key, str(root / value))
    return cfg


def resolve_seed(flag_seed, cfg: RunConfig, file_has_seed: bool) -> int:
    if flag_seed is not None:
        return int(flag_seed)
    if file_has_seed:
        return cfg.run.seed
    env = os.environ.get("SPANFORGE_SEED")
    if env:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"SPANFORGE_SEED must be an integer, got {env!r}") from exc
    return cfg.run.seed


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for name, section in cfg.sections().items():
        lines.append(f"[{name}]")
        for f in fields(section):
            lines.append(f"{f.name} = {_render(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)


def config_mentions(path, section: str, key: str) -> bool:
    if path is None:
        return False
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read(path, encoding="utf-8")
    return parser.has_option(section, key)
