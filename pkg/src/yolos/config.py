"""Run configuration and its flat ``key = value`` file format.

Lines hold dotted keys (``model.depth = 4``); ``#`` starts a comment.
Tuples are written ``64x64`` or ``64,64``.
"""

from __future__ import annotations

import dataclasses
import enum
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .matching import LossWeights
from .model import ModelConfig, PEScheme


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    schedule: str = "cosine"
    total_steps: int = 2000
    batch_size: int = 8
    warmup_steps: int = 0
    grad_clip: float = 0.1

    def __post_init__(self):
        if self.total_steps < 0:
            raise ValueError("optim.total_steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("optim.batch_size must be >= 1")
        if self.schedule != "cosine":
            raise ValueError(f"unsupported schedule {self.schedule!r}; only 'cosine' is available")


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # "synthetic" or a COCO-style annotations path
    train_count: int = 2000
    eval_count: int = 200
    canvas: tuple[int, int] = (64, 64)
    max_objects: int = 3
    min_size: int = 8  # shape side range in pixels; max_size None means half the canvas
    max_size: Optional[int] = None
    data_seed: int = 1
    short_min: int = 64
    short_max: int = 64
    long_max: int = 64
    eval_short: int = 64
    crop_prob: float = 0.0
    crop_min_frac: float = 0.6


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    detach_det_tokens: bool = False
    out: str = "runs/yolos-nano"
    threads: int = 1


def _parse_value(raw: str, tp):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if raw.lower() in ("none", "null", ""):
            return None
        return _parse_value(raw, args[0])
    if origin is tuple:
        parts = [p for p in raw.replace("x", ",").replace("X", ",").split(",") if p.strip()]
        args = typing.get_args(tp)
        return tuple(_parse_value(p.strip(), args[0]) for p in parts)
    if tp is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(tp, type) and issubclass(tp, enum.Enum):
        for member in tp:
            if raw.lower() in (member.value.lower(), member.name.lower()):
                return member
        raise ValueError(f"{raw!r} is not one of {[m.value for m in tp]}")
    if tp is int:
        return int(raw)
    if tp is float:
        return float(raw)
    return raw


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return "x".join(str(x) for x in v)
    if isinstance(v, enum.Enum):
        return v.value
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _hints(cls):
    return typing.get_type_hints(cls)


def apply_overrides(cfg, items: dict[str, str], prefix: str = ""):
    """Return a copy of ``cfg`` with dotted-key string values applied."""
    hints = _hints(type(cfg))
    names = {f.name for f in dataclasses.fields(cfg)}
    changes = {}
    nested: dict[str, dict[str, str]] = {}
    for key, raw in items.items():
        head, _, rest = key.partition(".")
        if head not in names:
            raise KeyError(f"unknown config key {prefix + key!r}")
        if rest:
            nested.setdefault(head, {})[rest] = raw
        else:
            if dataclasses.is_dataclass(getattr(cfg, head)):
                raise KeyError(f"config key {prefix + key!r} names a section, not a value")
            try:
                changes[head] = _parse_value(raw.strip(), hints[head])
            except ValueError as exc:
                raise ValueError(f"config key {prefix + key!r}: {exc}") from None
    for head, sub in nested.items():
        changes[head] = apply_overrides(getattr(cfg, head), sub, prefix + head + ".")
    return dataclasses.replace(cfg, **changes) if changes else cfg


def parse_lines(text: str, source: str = "<config>") -> dict[str, str]:
    items: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ValueError(f"{source}:{lineno}: empty key")
        items[key] = value
    return items


def load_config(path: Optional[str | Path] = None, overrides: Optional[dict[str, str]] = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        cfg = apply_overrides(cfg, parse_lines(p.read_text(encoding="utf-8"), str(p)))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def flatten(cfg, prefix: str = "") -> dict[str, str]:
    out: dict[str, str] = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            out.update(flatten(v, f"{prefix}{f.name}."))
        else:
            out[prefix + f.name] = _format_value(v)
    return out


def dump_config(cfg) -> str:
    return "".join(f"{k} = {v}\n" for k, v in flatten(cfg).items())


def model_from_file(path) -> ModelConfig:
    """Read just the ``model.*`` keys of a config file."""
    items = parse_lines(Path(path).read_text(encoding="utf-8"), str(path))
    sub = {k[len("model."):]: v for k, v in items.items() if k.startswith("model.")}
    return apply_overrides(ModelConfig(), sub, "model.")


__all__ = ["RunConfig", "OptimConfig", "DataConfig", "LossWeights", "ModelConfig", "PEScheme",
           "load_config", "apply_overrides", "dump_config", "parse_lines", "flatten", "model_from_file"]
