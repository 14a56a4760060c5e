"""Run configuration, seed derivation and environment overrides.

A run config is one JSON document. Loading rejects unknown keys at every
level; the stored effective config has every default filled in.

Environment overrides (only these two):

* ``DESKMAE_OUTPUT_DIR`` replaces ``output_dir``
* ``DESKMAE_THREADS`` replaces ``workers.threads``
"""
from __future__ import annotations

import dataclasses
import json
import os
import types
import typing
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    pass


def derive_seed(root: int, purpose: str) -> int:
    """Independent 32-bit stream seed for ``purpose`` under ``root``.

    ``SeedSequence([root, crc32(purpose)])``: streams for different purposes
    never share state, and adding a purpose leaves the others untouched.
    """
    ss = np.random.SeedSequence([int(root) & 0xFFFFFFFF, zlib.crc32(purpose.encode())])
    return int(ss.generate_state(1)[0])


@dataclass
class DataConfig:
    path: str | None = None  # dataset directory; None -> synthetic
    kind: str = "classification"
    n: int = 2000
    size: int = 32
    bands: int = 4
    classes: int = 4
    nir_weight: float = 0.8
    crop: bool = True
    area_range: tuple[float, float] = (0.2, 1.0)
    aspect_range: tuple[float, float] = (0.75, 4 / 3)
    flip_p: float = 0.5


@dataclass
class MaeSection:
    mask_ratio: float = 0.75
    decoder_width: int | None = None  # None -> scaled to the encoder width
    decoder_depth: int | None = None
    decoder_heads: int | None = None
    norm_pix: bool = True


@dataclass
class OptimSection:
    kind: str = "adamw"
    base_lr: float = 1.5e-4
    betas: tuple[float, float] = (0.9, 0.95)
    momentum: float = 0.9
    weight_decay: float = 0.05
    trust_coefficient: float = 0.001
    eps: float = 1e-8
    scale_with_batch: bool = True  # peak lr = base_lr * batch / 256


@dataclass
class ScheduleSection:
    kind: str = "cosine"
    warmup_epochs: float = 1.0
    epochs: float = 10.0
    min_lr: float = 0.0
    gamma: float = 0.1
    milestones: tuple[float, ...] = ()


@dataclass
class WorkersSection:
    k: int = 1
    strategy: str = "replicated"
    threads: int = 1


@dataclass
class RunConfig:
    run_id: str = "run"
    recipe: str = "vit-tiny"
    recipe_overrides: dict = field(default_factory=dict)
    dtype: str = "f32"
    data: DataConfig = field(default_factory=DataConfig)
    mae: MaeSection = field(default_factory=MaeSection)
    optim: OptimSection = field(default_factory=OptimSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    layer_decay: float | None = None
    workers: WorkersSection = field(default_factory=WorkersSection)
    batch_size: int = 64
    steps: int | None = None  # fixed step count; None -> epochs x steps per epoch
    seed: int = 0
    output_dir: str = "runs/run"
    checkpoint_every: int = 0
    log_every: int = 1
    init_checkpoint: str | None = None

    def to_dict(self) -> dict:
        return _to_jsonable(dataclasses.asdict(self))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _to_jsonable(x):
    if isinstance(x, dict):
        return {k: _to_jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_to_jsonable(v) for v in x]
    return x


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {unknown}")
    kw = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        val, hint = data[f.name], hints[f.name]
        path = f"{where}.{f.name}" if where else f.name
        if dataclasses.is_dataclass(hint):
            kw[f.name] = _build(hint, val, path)
        else:
            kw[f.name] = _coerce(val, hint, path)
    return cls(**kw)


def _coerce(val, hint, where):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if val is None:
        if type(None) in args:
            return None
        raise ConfigError(f"{where}: null not allowed")
    if origin in (typing.Union, types.UnionType):
        inner = [a for a in args if a is not type(None)]
        return _coerce(val, inner[0], where)
    if origin is tuple:
        if not isinstance(val, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], where) for v in val)
        if len(val) != len(args):
            raise ConfigError(f"{where}: expected {len(args)} values, got {len(val)}")
        return tuple(_coerce(v, a, where) for v, a in zip(val, args))
    if hint is bool:
        if not isinstance(val, bool):
            raise ConfigError(f"{where}: expected true/false")
        return val
    if hint is int:
        if isinstance(val, bool) or not isinstance(val, int):
            raise ConfigError(f"{where}: expected an integer")
        return val
    if hint is float:
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(val)
    if hint is str:
        if not isinstance(val, str):
            raise ConfigError(f"{where}: expected a string")
        return val
    if hint is dict or origin is dict:
        if not isinstance(val, dict):
            raise ConfigError(f"{where}: expected an object")
        return dict(val)
    return val


def from_dict(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data, "")
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    checks = [
        (cfg.dtype in ("f32", "f64"), "dtype must be f32 or f64"),
        (cfg.batch_size >= 1, "batch_size must be >= 1"),
        (cfg.steps is None or cfg.steps >= 1, "steps must be >= 1"),
        (cfg.workers.k >= 1, "workers.k must be >= 1"),
        (cfg.workers.strategy in ("replicated", "sharded"), "workers.strategy must be replicated or sharded"),
        (cfg.batch_size % cfg.workers.k == 0, "batch_size must be divisible by workers.k"),
        (cfg.data.kind in ("classification", "segmentation", "texture"), "data.kind unknown"),
        (cfg.layer_decay is None or 0 < cfg.layer_decay <= 1, "layer_decay must be in (0, 1]"),
        (cfg.checkpoint_every >= 0 and cfg.log_every >= 1, "checkpoint_every >= 0 and log_every >= 1"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)


def apply_env(cfg: RunConfig, env=None) -> RunConfig:
    env = os.environ if env is None else env
    if env.get("DESKMAE_OUTPUT_DIR"):
        cfg.output_dir = env["DESKMAE_OUTPUT_DIR"]
    if env.get("DESKMAE_THREADS"):
        try:
            cfg.workers.threads = max(1, int(env["DESKMAE_THREADS"]))
        except ValueError as e:
            raise ConfigError(f"DESKMAE_THREADS must be an integer, got {env['DESKMAE_THREADS']!r}") from e
    return cfg


def load_config(path, env=None) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from e
    return apply_env(from_dict(data), env)


# -- schema ------------------------------------------------------------------
def _schema_of(hint):
    origin, args = typing.get_origin(hint), typing.get_args(hint)
    if dataclasses.is_dataclass(hint):
        hints = typing.get_type_hints(hint)
        return {"type": "object", "additionalProperties": False,
                "properties": {f.name: _schema_of(hints[f.name]) for f in dataclasses.fields(hint)}}
    if type(None) in args:
        inner = _schema_of([a for a in args if a is not type(None)][0])
        return {"anyOf": [inner, {"type": "null"}]}
    if origin is tuple:
        if len(args) == 2 and args[1] is Ellipsis:
            return {"type": "array", "items": _schema_of(args[0])}
        return {"type": "array", "prefixItems": [_schema_of(a) for a in args], "minItems": len(args),
                "maxItems": len(args)}
    simple = {bool: "boolean", int: "integer", float: "number", str: "string", dict: "object"}
    return {"type": simple.get(hint, simple.get(origin, "object"))}


def json_schema() -> dict:
    s = _schema_of(RunConfig)
    s["$schema"] = "https://json-schema.org/draft/2020-12/schema"
    s["title"] = "deskmae run config"
    return s
