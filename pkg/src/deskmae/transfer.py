"""Weight surgery: band inflation, patch-filter resampling, positional-grid resampling.

Resampling is corner-aligned: output sample ``i`` of ``n_out`` sits at input
coordinate ``i (n_in - 1) / (n_out - 1)``. Interpolants are written in
difference form (``a + f (b - a)``), so constant inputs come back exactly and
integer sample positions reproduce the input bit for bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MODES = ("zero", "random", "mean_of_existing")
METHODS = ("bilinear", "bicubic")


@dataclass(frozen=True)
class InflationSpec:
    new_band_count: int
    init_mode: str = "random"
    seed: int = 0
    std: float | None = None  # random mode; None -> empirical std of existing weights

    def __post_init__(self):
        if self.init_mode not in MODES:
            raise ValueError(f"unknown init_mode {self.init_mode!r}; choose from {MODES}")


def _new_slices(existing: np.ndarray, extra: int, axis: int, spec: InflationSpec) -> np.ndarray:
    shape = list(existing.shape)
    shape[axis] = extra
    if spec.init_mode == "zero":
        return np.zeros(shape, dtype=existing.dtype)
    if spec.init_mode == "mean_of_existing":
        mean = existing.mean(axis=axis, keepdims=True, dtype=np.float64)
        return np.repeat(mean, extra, axis=axis).astype(existing.dtype)
    std = float(existing.std()) if spec.std is None else spec.std
    return np.random.default_rng(spec.seed).normal(0.0, std, size=shape).astype(existing.dtype)


def inflate_bands(weight: np.ndarray, spec: InflationSpec) -> np.ndarray:
    """``[D, c, p, p]`` -> ``[D, c', p, p]``; the first ``c`` slices are copied verbatim."""
    weight = np.asarray(weight)
    c = weight.shape[1]
    if spec.new_band_count <= c:
        raise ValueError(f"new_band_count {spec.new_band_count} must exceed current band count {c}")
    return np.concatenate([weight, _new_slices(weight, spec.new_band_count - c, 1, spec)], axis=1)


def inflate_pixel_head(weight: np.ndarray, bias: np.ndarray, patch: int, spec: InflationSpec):
    """Extend a pixel-prediction head (rows laid out pixel-major, band-minor) to more bands."""
    rows, dd = weight.shape
    c = rows // (patch * patch)
    if c * patch * patch != rows:
        raise ValueError(f"{rows} output rows are not a multiple of patch area {patch * patch}")
    if spec.new_band_count <= c:
        raise ValueError(f"new_band_count {spec.new_band_count} must exceed current band count {c}")
    extra = spec.new_band_count - c
    w = weight.reshape(patch * patch, c, dd)
    b = bias.reshape(patch * patch, c)
    w2 = np.concatenate([w, _new_slices(w, extra, 1, spec)], axis=1)
    zero_bias = InflationSpec(spec.new_band_count, "zero") if spec.init_mode == "random" else spec
    b2 = np.concatenate([b, _new_slices(b, extra, 1, zero_bias)], axis=1)
    return w2.reshape(-1, dd), b2.reshape(-1)


EMBED_KEYS = ("patch_embed_weight", "encoder.patch_embed_weight")
PRED_KEYS = ("decoder.decoder_pred.weight", "decoder_pred.weight")


def inflate_state(state: dict[str, np.ndarray], patch: int, spec: InflationSpec) -> dict[str, np.ndarray]:
    """Inflate every band-dependent tensor of a model state dict."""
    out = dict(state)
    found = False
    for k in EMBED_KEYS:
        if k in out:
            out[k] = inflate_bands(out[k], spec)
            found = True
    if not found:
        raise KeyError("state has no patch-embedding weight to inflate")
    for k in PRED_KEYS:
        if k in out:
            bk = k[: -len("weight")] + "bias"
            out[k], out[bk] = inflate_pixel_head(out[k], out[bk], patch, spec)
    return out


# -- resampling --------------------------------------------------------------
def _cubic_weights(t: np.ndarray, a: float = -0.5):
    """Keys cubic weights for taps at offsets -1, 0, 1, 2 from the floor sample."""
    def k(x):
        x = np.abs(x)
        return np.where(x <= 1, (a + 2) * x ** 3 - (a + 3) * x ** 2 + 1,
                        np.where(x < 2, a * x ** 3 - 5 * a * x ** 2 + 8 * a * x - 4 * a, 0.0))
    return k(t + 1), k(t), k(1 - t), k(2 - t)


def resample_axis(arr: np.ndarray, axis: int, n_out: int, method: str = "bilinear") -> np.ndarray:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    n_in = arr.shape[axis]
    if n_out == n_in:
        return arr.copy()
    x = np.moveaxis(arr, axis, 0).astype(np.float64)
    pos = np.zeros(n_out) if n_out == 1 or n_in == 1 else np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.minimum(np.floor(pos).astype(int), n_in - 1)
    t = pos - i0
    shape = (n_out,) + (1,) * (x.ndim - 1)
    clamp = lambda i: np.clip(i, 0, n_in - 1)  # noqa: E731
    x1 = x[i0]
    if method == "bilinear":
        out = x1 + t.reshape(shape) * (x[clamp(i0 + 1)] - x1)
    else:
        w0, _, w2, w3 = (w.reshape(shape) for w in _cubic_weights(t))
        out = x1 + w0 * (x[clamp(i0 - 1)] - x1) + w2 * (x[clamp(i0 + 1)] - x1) + w3 * (x[clamp(i0 + 2)] - x1)
    return np.moveaxis(out, 0, axis).astype(arr.dtype)


def interp_patch_filters(weight: np.ndarray, new_patch: int, method: str = "bilinear") -> np.ndarray:
    """Resample every ``[p, p]`` filter of ``[D, c, p, p]`` to ``[p', p']``."""
    if new_patch < 2:
        raise ValueError(f"target patch size must be >= 2, got {new_patch}")
    weight = np.asarray(weight)
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ValueError(f"expected square filters [D, c, p, p], got {weight.shape}")
    return resample_axis(resample_axis(weight, 2, new_patch, method), 3, new_patch, method)


def split_grid(tokens: int, has_cls: bool | None = None) -> tuple[int, bool]:
    """``(g, has_cls)`` for a token count of ``g^2`` or ``g^2 + 1``."""
    options = [has_cls] if has_cls is not None else [False, True]
    for cls in options:
        g = math.isqrt(tokens - int(cls))
        if g >= 1 and g * g == tokens - int(cls):
            return g, cls
    raise ValueError(f"{tokens} tokens is not g^2 or g^2+1")


def interp_pos_embed(pe: np.ndarray, new_grid: int, method: str = "bilinear",
                     has_cls: bool | None = None) -> np.ndarray:
    """Resample the grid part of ``[1, g^2(+1), D]`` to ``new_grid``; the cls slot passes through."""
    if new_grid < 1:
        raise ValueError("new_grid must be >= 1")
    pe = np.asarray(pe)
    if pe.ndim != 3 or pe.shape[0] != 1:
        raise ValueError(f"expected [1, T, D], got {pe.shape}")
    g, cls = split_grid(pe.shape[1], has_cls)
    if new_grid == g:
        return pe.copy()
    d = pe.shape[2]
    grid = pe[0, int(cls):].reshape(g, g, d)
    grid = resample_axis(resample_axis(grid, 0, new_grid, method), 1, new_grid, method)
    parts = ([pe[0, :1]] if cls else []) + [grid.reshape(new_grid * new_grid, d)]
    return np.concatenate(parts)[None]
