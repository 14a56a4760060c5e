"""Parameter containers and transformer building blocks."""
from __future__ import annotations

import hashlib
import math
from typing import Iterator

import numpy as np

from .tensor import Tensor, gelu, layernorm, matmul, softmax


class Module:
    """Walks attributes (Tensors, Modules, lists of Modules) to name parameters."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_params(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        if strict:
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for k, p in params.items():
            if k not in state:
                continue
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"{k}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = np.ascontiguousarray(arr, dtype=p.dtype)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(p.data.tobytes())
        return h.hexdigest()


def param(arr: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


def xavier_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_out, fan_in))


class Linear(Module):
    """``y = x @ weight.T + bias`` with weight stored ``[out, in]``."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32, std: float | None = None):
        w = xavier_uniform(rng, d_out, d_in) if std is None else rng.normal(0.0, std, size=(d_out, d_in))
        self.weight = param(w, dtype)
        self.bias = param(np.zeros(d_out), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, _t(self.weight)) + self.bias


def _t(w: Tensor) -> Tensor:
    return w.transpose(1, 0)


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float32, eps: float = 1e-6):
        self.weight = param(np.ones(d), dtype)
        self.bias = param(np.zeros(d), dtype)
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layernorm(x, self.weight, self.bias, self._eps)


class Attention(Module):
    def __init__(self, d: int, heads: int, rng, dtype=np.float32):
        if d % heads:
            raise ValueError(f"width {d} not divisible by heads {heads}")
        self._heads = heads
        self.qkv = Linear(d, 3 * d, rng, dtype)
        self.proj = Linear(d, d, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        h = self._heads
        dh = d // h
        qkv = self.qkv(x).reshape(b, n, 3, h, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = softmax(matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh)))
        out = matmul(att, v).transpose(0, 2, 1, 3).reshape(b, n, d)
        return self.proj(out)


class Mlp(Module):
    def __init__(self, d: int, hidden: int, rng, dtype=np.float32):
        self.fc1 = Linear(d, hidden, rng, dtype)
        self.fc2 = Linear(hidden, d, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, d: int, heads: int, mlp: int, rng, dtype=np.float32):
        self.norm1 = LayerNorm(d, dtype)
        self.attn = Attention(d, heads, rng, dtype)
        self.norm2 = LayerNorm(d, dtype)
        self.mlp = Mlp(d, mlp, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))
