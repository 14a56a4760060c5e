"""Dense tensor with reverse-mode automatic differentiation.

Only the operations the ViT/MAE stack needs are provided. Broadcasting is
limited to the patterns the model uses: an operand whose shape is a suffix of
the other's (bias / affine parameters), optionally with leading unit axes
(positional tables, cls and mask tokens), plus python scalars.

Shape rules per op:

* ``matmul(a, b)``: ``a[..., M, K] @ b[K, N]`` or ``a[..., M, K] @ b[..., K, N]``
  with identical leading axes.
* ``layernorm``, ``softmax``, ``gelu``: act on the last axis / elementwise.
* ``gather(x, idx)``: ``x[B, N, D]``, ``idx[B, K]`` -> ``[B, K, D]``.
* ``mse_loss(pred, target, weights)``: per-row mean over the last axis, then
  a weighted mean over rows.
* ``cross_entropy(logits[B, C], labels[B])``: mean over the batch.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels

_DTYPES = {"f32": np.float32, "f64": np.float64}
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class GraphReleasedError(RuntimeError):
    """backward() was called twice on the same graph."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "_released")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(dtype, str):
            dtype = _DTYPES[dtype]
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self._released = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    # -- graph ------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if self._released:
            raise GraphReleasedError("backward() already ran on this graph; rebuild it with a new forward pass")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        for node in order:
            node._parents = ()
            node._backward = None
            node._released = node._released or node is self or node.op != "leaf"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Iterable[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    parents = tuple(parents)
    if grad_enabled() and any(_needs_grad(p) for p in parents):
        out._parents = parents
        out._backward = backward
    out.op = op
    return out


def _check_dtypes(*ts: Tensor) -> None:
    dts = {t.dtype for t in ts}
    if len(dts) > 1:
        raise TypeError(f"dtype mismatch: {sorted(str(d) for d in dts)}")


def _check_trailing(big: tuple, small: tuple, op: str) -> None:
    big, s = tuple(big), tuple(small)
    while True:
        if len(s) <= len(big) and big[len(big) - len(s):] == s:
            return
        if s and s[0] == 1:
            s = s[1:]
            continue
        raise ShapeError(f"{op}: shape {tuple(small)} does not match trailing axes of {big}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_pair(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or b.data.ndim == 0 or a.data.ndim == 0:
        return
    if b.data.size <= a.data.size:
        _check_trailing(a.shape, b.shape, op)
    else:
        _check_trailing(b.shape, a.shape, op)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _as_tensor(b, a.dtype)
    _check_dtypes(a, b)
    _broadcast_pair(a, b, "add")
    out = a.data + b.data
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(out, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        c = a.dtype.type(b)
        return _make(a.data * c, (a,), lambda g: (g * c,), "scale")
    _check_dtypes(a, b)
    _broadcast_pair(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), backward, "mul")


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    _check_trailing(shape, x.shape, "broadcast_to")
    src = x.shape
    return _make(np.ascontiguousarray(np.broadcast_to(x.data, shape)), (x,),
                 lambda g: (_unbroadcast(g, src),), "broadcast")


# ---------------------------------------------------------------------------
# linear algebra / shape
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul leading axes differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if not axes:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose axes {axes} invalid for {x.ndim}-D tensor")
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    _check_dtypes(*ts)
    ax = axis % ts[0].ndim
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, backward, "concat")


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def index(x: Tensor, idx) -> Tensor:
    src_shape, dt = x.shape, x.dtype
    basic = _is_basic(idx)

    def backward(g):
        full = np.zeros(src_shape, dtype=dt)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.ascontiguousarray(x.data[idx]), (x,), backward, "index")


def gather(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select tokens: ``x[B, N, D]`` with ``idx[B, K]`` gives ``[B, K, D]``."""
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim != 3 or idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise ShapeError(f"gather expects x[B,N,D] and idx[B,K], got {x.shape} and {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise IndexError(f"gather index out of range for axis of length {x.shape[1]}")
    src_shape, dt = x.shape, x.dtype
    rows = np.arange(x.shape[0])[:, None]
    distinct = idx.shape[1] < 2 or bool((np.diff(np.sort(idx, axis=1), axis=1) > 0).all())

    def backward(g):
        full = np.zeros(src_shape, dtype=dt)
        if distinct:
            full[rows, idx] = g
        else:
            np.add.at(full, (rows, idx), g)
        return (full,)

    return _make(x.data[rows, idx], (x,), backward, "gather")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    src = x.shape
    kshape = tuple(1 if i in axes else n for i, n in enumerate(src))

    def backward(g):
        return (np.broadcast_to(g.reshape(kshape), src).copy(),)

    return _make(np.asarray(x.data.sum(axis=axes, keepdims=keepdims)), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(tsum(x, axis, keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# nonlinearities and normalisation
# ---------------------------------------------------------------------------

def _rows(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a).reshape(-1, a.shape[-1]) if a.ndim else a.reshape(1, 1)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    xd = x.data
    y = _kernels.active.gelu_fwd(_rows(xd)).reshape(xd.shape)

    def backward(g):
        return (_kernels.active.gelu_bwd(_rows(xd), _rows(g)).reshape(xd.shape),)

    return _make(y, (x,), backward, "gelu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if axis not in (-1, x.ndim - 1):
        raise ShapeError("softmax is only supported over the last axis")
    y = _kernels.active.softmax_fwd(_rows(x.data)).reshape(x.shape)

    def backward(g):
        return (_kernels.active.softmax_bwd(_rows(y), _rows(g)).reshape(y.shape),)

    return _make(y, (x,), backward, "softmax")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    if eps <= 0:
        raise ValueError("layernorm eps must be > 0")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm affine params {gamma.shape}/{beta.shape} do not match last axis {d}")
    _check_dtypes(x, gamma, beta)
    k = _kernels.active
    y, xhat, rstd = k.layernorm_fwd(_rows(x.data), gamma.data, beta.data, x.dtype.type(eps))
    shape = x.shape
    gd = gamma.data

    def backward(g):
        gx, gg, gb = k.layernorm_bwd(_rows(g), xhat, rstd, gd)
        return gx.reshape(shape), gg, gb

    return _make(y.reshape(shape), (x, gamma, beta), backward, "layernorm")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def mse_loss(pred: Tensor, target, weights=None) -> Tensor:
    """Mean over rows of per-row mean squared error, optionally row-weighted.

    ``pred[..., F]``; ``weights`` has shape ``pred.shape[:-1]``. With weights the
    result is ``sum(w * row_mse) / sum(w)``.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ShapeError(f"mse_loss shapes differ: {pred.shape} vs {t.shape}")
    diff = pred.data - t
    row = (diff * diff).mean(axis=-1)
    if weights is None:
        w = np.ones(row.shape, dtype=pred.dtype)
    else:
        w = np.asarray(weights, dtype=pred.dtype)
        if w.shape != row.shape:
            raise ShapeError(f"mse_loss weights {w.shape} do not match rows {row.shape}")
    total = w.sum()
    if total <= 0:
        raise ValueError("mse_loss weights sum to zero")
    loss = (w * row).sum() / total
    f = pred.shape[-1]

    def backward(g):
        gp = g * (2.0 / (f * total)) * w[..., None] * diff
        return (gp.astype(pred.dtype, copy=False),)

    return _make(np.asarray(loss, dtype=pred.dtype), (pred,), backward, "mse_loss")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects logits[B,C] and labels[B], got {logits.shape}, {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise IndexError("cross_entropy label outside class range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    b = logits.shape[0]
    rows = np.arange(b)
    loss = (lse - z[rows, labels]).mean()

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return ((g / b) * p,)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# patch projection
# ---------------------------------------------------------------------------

def patch_project(patches: np.ndarray, weight: Tensor, bias: Tensor) -> Tensor:
    """Project channel-planar patches ``[B, N, c, p*p]`` with ``weight[D, c, p, p]``.

    Channel contributions are accumulated one band at a time onto the bias, so
    appending a band whose weights are zero leaves the result bit-identical.
    """
    d, c = weight.shape[0], weight.shape[1]
    pp = weight.shape[2] * weight.shape[3]
    if patches.ndim != 4 or patches.shape[2] != c or patches.shape[3] != pp:
        raise ShapeError(f"patch_project: patches {patches.shape} vs weight {weight.shape}")
    if bias.shape != (d,):
        raise ShapeError(f"patch_project: bias {bias.shape} vs width {d}")
    _check_dtypes(weight, bias)
    patches = np.asarray(patches, dtype=weight.dtype)
    w = weight.data.reshape(d, c, pp)
    out = np.broadcast_to(bias.data, patches.shape[:2] + (d,)).copy()
    for ch in range(c):
        out += patches[:, :, ch, :] @ w[:, ch, :].T

    def backward(g):
        g2 = g.reshape(-1, d)
        gw = np.empty_like(w)
        for ch in range(c):
            gw[:, ch, :] = g2.T @ patches[:, :, ch, :].reshape(-1, pp)
        return gw.reshape(weight.shape), g2.sum(axis=0)

    return _make(out, (weight, bias), backward, "patch_project")
