"""Flat ``key = value`` configuration files for the training pipeline.

Keys are dotted: ``arch.<field>``, ``train.<field>`` (all stages),
``train.<stage>.<field>`` (one stage), ``augment.<field>``, ``data.<field>``
and ``pipeline.<field>``. ``#`` starts a comment. Unknown keys are errors.

Example::

    arch.base_width = 16
    train.crop = 64
    train.boundary_pretrain.total_iters = 500
    train.segmenter_pretrain.lr_scales = hed.:0
    augment.rotation_range = 0, 15
"""

from __future__ import annotations

import copy
import types
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .graph import ArchConfig
from .ops import ConfigError
from .training import STAGES, AugmentConfig, TrainConfig, default_train_configs


@dataclass
class DataConfig:
    dir: str = "data"
    val_fraction: float = 0.2
    radius: int = 3
    truncation: float = 4.0
    beta_mode: str = "background_total"


@dataclass
class PipelineOptions:
    seed: int = 0
    skip_boundary_pretrain: bool = False
    reinject_skip: bool = True
    out_dir: str = "run"


@dataclass
class PipelineConfig:
    arch: ArchConfig = field(default_factory=ArchConfig)
    stages: dict[str, TrainConfig] = field(default_factory=default_train_configs)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    data: DataConfig = field(default_factory=DataConfig)
    pipeline: PipelineOptions = field(default_factory=PipelineOptions)


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _convert(text: str, hint, default):
    origin = typing.get_origin(hint)
    if hint is bool:
        return _parse_bool(text)
    if hint is int:
        return int(text)
    if hint is float:
        return float(text)
    if hint is str:
        return text
    if origin is tuple:
        args = [a for a in typing.get_args(hint) if a is not Ellipsis]
        elem = args[0] if args else float
        return tuple(_convert(p.strip(), elem, None) for p in text.split(",") if p.strip())
    if origin is dict:
        out = {}
        for item in filter(None, (p.strip() for p in text.split(","))):
            key, sep, val = item.rpartition(":")
            if not sep:
                raise ValueError(f"expected prefix:value, got {item!r}")
            out[key.strip()] = float(val)
        return out
    if origin in (typing.Union, types.UnionType):
        if text.lower() in ("none", ""):
            return None
        for arg in typing.get_args(hint):
            if arg is type(None):
                continue
            try:
                return _convert(text, arg, default)
            except ValueError:
                pass
    raise ValueError(f"cannot convert {text!r}")


def _set(obj, name: str, text: str, key: str, lineno: int):
    hints = typing.get_type_hints(type(obj))
    names = {f.name for f in fields(obj)}
    if name not in names:
        raise ConfigError(f"line {lineno}: unknown key {key!r}")
    try:
        value = _convert(text, hints[name], getattr(obj, name))
    except ValueError as exc:
        raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from None
    setattr(obj, name, value)


def parse_config(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    cfg = copy.deepcopy(base) if base else PipelineConfig()
    per_stage: list[tuple[str, str, str, str, int]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw.strip()!r}")
        parts = key.split(".")
        section = parts[0]
        if section == "train" and len(parts) == 3:
            if parts[1] not in STAGES:
                raise ConfigError(f"line {lineno}: unknown key {key!r} (no stage {parts[1]!r})")
            per_stage.append((parts[1], parts[2], value, key, lineno))
        elif section == "train" and len(parts) == 2:
            if parts[1] == "stage":
                raise ConfigError(f"line {lineno}: 'train.stage' is fixed per stage section")
            for st in cfg.stages.values():
                _set(st, parts[1], value, key, lineno)
        elif len(parts) == 2 and section in ("arch", "augment", "data", "pipeline"):
            _set(getattr(cfg, section), parts[1], value, key, lineno)
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    # stage-specific values win over train.* regardless of order
    for stage, name, value, key, lineno in per_stage:
        if name == "stage":
            raise ConfigError(f"line {lineno}: 'stage' cannot be overridden")
        _set(cfg.stages[stage], name, value, key, lineno)
    try:
        cfg.arch.validate()
        for st in cfg.stages.values():
            st.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if cfg.data.beta_mode not in ("background_total", "background_boundary"):
        raise ConfigError(f"unknown data.beta_mode {cfg.data.beta_mode!r}")
    return cfg


def load_config(path) -> PipelineConfig:
    return parse_config(Path(path).read_text())
