"""Optimizers and learning-rate machinery.

The step functions work on plain lists of numpy arrays and update them in
place, so the same code serves whole models, single tensors and the flat
parameter shards of the distributed simulator.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels

REFERENCE_BATCH = 256


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"non-finite gradient in parameter {name!r}")


@dataclass(frozen=True)
class OptimSpec:
    kind: str = "adamw"
    base_lr: float = 1.5e-4
    betas: tuple[float, float] = (0.9, 0.95)
    momentum: float = 0.9
    weight_decay: float = 0.05
    trust_coefficient: float = 0.001
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("adamw", "lars", "sgd"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.base_lr <= 0 or self.eps <= 0:
            raise ValueError("base_lr and eps must be > 0")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1 and 0 <= self.momentum < 1):
            raise ValueError("betas and momentum must lie in [0, 1)")
        object.__setattr__(self, "betas", (float(b1), float(b2)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str = "cosine"
    warmup_epochs: float = 0.0
    total_epochs: float = 1.0
    peak_lr: float = 1e-3
    min_lr: float = 0.0
    gamma: float = 0.1
    milestones: tuple[float, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.kind not in ("cosine", "step"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("need 0 <= warmup_epochs < total_epochs")
        if self.min_lr > self.peak_lr:
            raise ValueError("min_lr must not exceed peak_lr")
        object.__setattr__(self, "milestones", tuple(float(m) for m in self.milestones))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d


@dataclass(frozen=True)
class LayerDecaySpec:
    rate: float = 1.0

    def __post_init__(self):
        if not 0 < self.rate <= 1:
            raise ValueError("layer decay rate must be in (0, 1]")


def scale_lr(base_lr: float, effective_batch: int) -> float:
    """Linear scaling rule against a reference batch of 256."""
    if effective_batch < 1:
        raise ValueError("effective_batch must be >= 1")
    return base_lr * effective_batch / REFERENCE_BATCH


def lr_at(sched: ScheduleSpec, epoch: float) -> float:
    """Learning rate at a fractional epoch: linear warmup, then cosine or step decay."""
    w, t = sched.warmup_epochs, sched.total_epochs
    if epoch < w:
        return sched.peak_lr * epoch / w
    if sched.kind == "cosine":
        progress = min(1.0, (epoch - w) / (t - w))
        return sched.min_lr + (sched.peak_lr - sched.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))
    passed = sum(1 for m in sched.milestones if epoch >= m)
    return sched.peak_lr * sched.gamma ** passed


def layer_multiplier(spec: LayerDecaySpec, group: int, depth: int) -> float:
    if not 0 <= group <= depth + 1:
        raise ValueError(f"group {group} outside [0, {depth + 1}]")
    return spec.rate ** (depth + 1 - group)


def _check_finite(grads, names):
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(names[i] if names else f"#{i}")


def init_state(params) -> dict:
    return {"step": 0,
            "m": [np.zeros_like(p) for p in params],
            "v": [np.zeros_like(p) for p in params]}


def adamw_step(params, grads, state, spec: OptimSpec, lr: float, lr_scales=None, decay=None, names=None) -> dict:
    """Bias-corrected Adam with decoupled weight decay ``w <- w (1 - lr wd)``.

    ``lr_scales`` gives a per-tensor lr multiplier; ``decay`` a per-tensor
    bool or a per-element mask selecting which entries are decayed.
    """
    _check_finite(grads, names)
    b1, b2 = spec.betas
    state["step"] += 1
    t = state["step"]
    bc1, bc2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    kern = _kernels.active.adamw_update
    for i, (w, g) in enumerate(zip(params, grads)):
        eff = lr * (lr_scales[i] if lr_scales is not None else 1.0)
        if decay is None:
            wd = spec.weight_decay
        else:
            wd = np.asarray(decay[i], dtype=w.dtype) * spec.weight_decay
        kern(w, np.asarray(g, dtype=w.dtype), state["m"][i], state["v"][i],
             eff, b1, b2, spec.eps, wd, bc1, bc2)
    return state


def lars_local_lr(w: np.ndarray, g: np.ndarray, trust: float, weight_decay: float) -> float:
    """``trust * |w| / (|g| + wd |w|)``; falls back to 1 when either norm is zero."""
    wn = float(np.linalg.norm(w))
    gn = float(np.linalg.norm(g))
    if wn > 0 and gn > 0:
        return trust * wn / (gn + weight_decay * wn)
    return 1.0


def lars_step(params, grads, state, spec: OptimSpec, lr: float, lr_scales=None, decay=None, names=None) -> dict:
    """Layer-wise adaptive rate scaling on top of SGD with momentum (per tensor)."""
    _check_finite(grads, names)
    state["step"] += 1
    for i, (w, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=w.dtype)
        wd = spec.weight_decay if decay is None or decay[i] else 0.0
        local = lars_local_lr(w, g, spec.trust_coefficient, wd)
        eff = lr * (lr_scales[i] if lr_scales is not None else 1.0) * local
        buf = state["m"][i]
        buf *= spec.momentum
        buf += eff * (g + wd * w)
        w -= buf
    return state


def sgd_step(params, grads, state, spec: OptimSpec, lr: float, lr_scales=None, decay=None, names=None) -> dict:
    _check_finite(grads, names)
    state["step"] += 1
    for i, (w, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=w.dtype)
        wd = spec.weight_decay if decay is None else np.asarray(decay[i], dtype=w.dtype) * spec.weight_decay
        buf = state["m"][i]
        buf *= spec.momentum
        buf += g + wd * w
        w -= lr * (lr_scales[i] if lr_scales is not None else 1.0) * buf
    return state


STEP_FNS = {"adamw": adamw_step, "lars": lars_step, "sgd": sgd_step}


NO_DECAY_NAMES = ("cls_token", "mask_token")


def decays(name: str, arr: np.ndarray) -> bool:
    """Norms, biases and special tokens are exempt from weight decay."""
    return arr.ndim > 1 and not name.endswith(NO_DECAY_NAMES)


class Optimizer:
    """Binds a step function to named parameters with per-tensor lr multipliers."""

    def __init__(self, named_params, spec: OptimSpec, lr_scales: dict[str, float] | None = None,
                 exempt_decay: bool = True):
        self.names = [n for n, _ in named_params]
        self.tensors = [p for _, p in named_params]
        self.spec = spec
        self.lr_scales = [float((lr_scales or {}).get(n, 1.0)) for n in self.names]
        self.decay = [decays(n, p.data) if exempt_decay else True for n, p in zip(self.names, self.tensors)]
        self.state = init_state([p.data for p in self.tensors])
        self._fn = STEP_FNS[spec.kind]

    def step(self, lr: float) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.tensors]
        self._fn([p.data for p in self.tensors], grads, self.state, self.spec, lr,
                 self.lr_scales, self.decay, self.names)

    def zero_grad(self) -> None:
        for p in self.tensors:
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"optim/step": np.array([self.state["step"]], dtype=np.int64)}
        for n, m, v in zip(self.names, self.state["m"], self.state["v"]):
            out[f"optim/m/{n}"] = m
            out[f"optim/v/{n}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.state["step"] = int(arrays["optim/step"][0])
        for i, n in enumerate(self.names):
            self.state["m"][i][...] = arrays[f"optim/m/{n}"]
            self.state["v"][i][...] = arrays[f"optim/v/{n}"]


def layer_scales(model, spec: LayerDecaySpec | None, names) -> dict[str, float]:
    if spec is None:
        return {}
    depth = model.recipe.depth
    return {n: layer_multiplier(spec, model.param_group(n), depth) for n in names}
