"""Hot inner kernels with a numba path and a pure-numpy fallback.

The active backend is chosen once at import time. Set ``DESKMAE_NUMBA=0`` to
force the numpy path (useful for debugging and for the benchmark). Both
backends are always importable as ``numpy_impl`` / ``numba_impl`` so they can
be compared side by side.

All kernels operate on C-contiguous 2-D views; callers reshape.
"""
from __future__ import annotations

import math
import os
from types import SimpleNamespace

import numpy as np
from scipy.special import erf as _erf

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------

def _np_layernorm_fwd(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def _np_layernorm_bwd(g, xhat, rstd, gamma):
    gxhat = g * gamma
    gx = (gxhat - gxhat.mean(axis=1, keepdims=True)
          - xhat * (gxhat * xhat).mean(axis=1, keepdims=True)) * rstd[:, None]
    return gx, (g * xhat).sum(axis=0), g.sum(axis=0)


def _np_gelu_fwd(x):
    return 0.5 * x * (1.0 + _erf(x * _INV_SQRT2))


def _np_gelu_bwd(x, g):
    cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return g * (cdf + x * pdf)


def _np_softmax_fwd(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _np_softmax_bwd(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def _np_adamw_update(w, g, m, v, lr, beta1, beta2, eps, wd, bc1, bc2):
    # in place; wd is an array (per-element decay flag times rate) or scalar
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    mhat = m / bc1
    vhat = v / bc2
    w *= 1.0 - lr * wd
    w -= lr * (mhat / (np.sqrt(vhat) + eps))


def _np_confusion(pred, truth, k):
    return np.bincount(truth * k + pred, minlength=k * k).reshape(k, k).astype(np.int64)


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

def _build_numba():
    import numba

    jit = numba.njit(cache=True, fastmath=False, nogil=True)

    @jit
    def layernorm_fwd(x, gamma, beta, eps):
        n, d = x.shape
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(n, dtype=x.dtype)
        for i in range(n):
            mu = 0.0
            for j in range(d):
                mu += x[i, j]
            mu /= d
            var = 0.0
            for j in range(d):
                c = x[i, j] - mu
                var += c * c
            var /= d
            r = 1.0 / math.sqrt(var + eps)
            rstd[i] = r
            for j in range(d):
                h = (x[i, j] - mu) * r
                xhat[i, j] = h
                y[i, j] = h * gamma[j] + beta[j]
        return y, xhat, rstd

    @jit
    def layernorm_bwd(g, xhat, rstd, gamma):
        n, d = g.shape
        gx = np.empty_like(g)
        ggamma = np.zeros(d, dtype=g.dtype)
        gbeta = np.zeros(d, dtype=g.dtype)
        for i in range(n):
            s1 = 0.0
            s2 = 0.0
            for j in range(d):
                gh = g[i, j] * gamma[j]
                s1 += gh
                s2 += gh * xhat[i, j]
                ggamma[j] += g[i, j] * xhat[i, j]
                gbeta[j] += g[i, j]
            s1 /= d
            s2 /= d
            for j in range(d):
                gx[i, j] = (g[i, j] * gamma[j] - s1 - xhat[i, j] * s2) * rstd[i]
        return gx, ggamma, gbeta

    @jit
    def gelu_fwd(x):
        n, d = x.shape
        y = np.empty_like(x)
        for i in range(n):
            for j in range(d):
                v = x[i, j]
                y[i, j] = 0.5 * v * (1.0 + math.erf(v * _INV_SQRT2))
        return y

    @jit
    def gelu_bwd(x, g):
        n, d = x.shape
        out = np.empty_like(x)
        for i in range(n):
            for j in range(d):
                v = x[i, j]
                cdf = 0.5 * (1.0 + math.erf(v * _INV_SQRT2))
                pdf = math.exp(-0.5 * v * v) * _INV_SQRT2PI
                out[i, j] = g[i, j] * (cdf + v * pdf)
        return out

    @jit
    def softmax_fwd(x):
        n, d = x.shape
        y = np.empty_like(x)
        for i in range(n):
            mx = x[i, 0]
            for j in range(1, d):
                if x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(d):
                e = math.exp(x[i, j] - mx)
                y[i, j] = e
                s += e
            for j in range(d):
                y[i, j] /= s
        return y

    @jit
    def softmax_bwd(y, g):
        n, d = y.shape
        out = np.empty_like(y)
        for i in range(n):
            dot = 0.0
            for j in range(d):
                dot += g[i, j] * y[i, j]
            for j in range(d):
                out[i, j] = y[i, j] * (g[i, j] - dot)
        return out

    @jit
    def _adamw_flat(w, g, m, v, lr, beta1, beta2, eps, wd, bc1, bc2):
        for i in range(w.size):
            gi = g[i]
            mi = m[i] * beta1
            mi += (1.0 - beta1) * gi
            vi = v[i] * beta2
            vi += (1.0 - beta2) * (gi * gi)
            m[i] = mi
            v[i] = vi
            wi = w[i] * (1.0 - lr * wd[i])
            w[i] = wi - lr * ((mi / bc1) / (math.sqrt(vi / bc2) + eps))

    @jit
    def _adamw_flat_scalar(w, g, m, v, lr, beta1, beta2, eps, wd, bc1, bc2):
        shrink = 1.0 - lr * wd
        for i in range(w.size):
            gi = g[i]
            mi = m[i] * beta1
            mi += (1.0 - beta1) * gi
            vi = v[i] * beta2
            vi += (1.0 - beta2) * (gi * gi)
            m[i] = mi
            v[i] = vi
            w[i] = w[i] * shrink - lr * ((mi / bc1) / (math.sqrt(vi / bc2) + eps))

    def adamw_update(w, g, m, v, lr, beta1, beta2, eps, wd, bc1, bc2):
        flat = (w.reshape(-1), np.ascontiguousarray(g).reshape(-1), m.reshape(-1), v.reshape(-1))
        if np.ndim(wd) == 0:
            # cast through the param dtype so the decay factor rounds like the numpy path
            _adamw_flat_scalar(*flat, lr, beta1, beta2, eps, float(w.dtype.type(wd)), bc1, bc2)
            return
        wd_arr = np.broadcast_to(np.asarray(wd, dtype=w.dtype), w.shape)
        _adamw_flat(*flat, lr, beta1, beta2, eps, np.ascontiguousarray(wd_arr).reshape(-1), bc1, bc2)

    @jit
    def confusion(pred, truth, k):
        cm = np.zeros((k, k), dtype=np.int64)
        for i in range(pred.size):
            cm[truth[i], pred[i]] += 1
        return cm

    return SimpleNamespace(
        name="numba",
        layernorm_fwd=layernorm_fwd, layernorm_bwd=layernorm_bwd,
        gelu_fwd=gelu_fwd, gelu_bwd=gelu_bwd,
        softmax_fwd=softmax_fwd, softmax_bwd=softmax_bwd,
        adamw_update=adamw_update, confusion=confusion,
    )


numpy_impl = SimpleNamespace(
    name="numpy",
    layernorm_fwd=_np_layernorm_fwd, layernorm_bwd=_np_layernorm_bwd,
    gelu_fwd=_np_gelu_fwd, gelu_bwd=_np_gelu_bwd,
    softmax_fwd=_np_softmax_fwd, softmax_bwd=_np_softmax_bwd,
    adamw_update=_np_adamw_update, confusion=_np_confusion,
)

try:
    numba_impl = _build_numba()
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba_impl = None

USE_NUMBA = os.environ.get("DESKMAE_NUMBA", "1") != "0" and numba_impl is not None
active = numba_impl if USE_NUMBA else numpy_impl


def backend_name() -> str:
    return active.name
