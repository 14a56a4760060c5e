"""Tile augmentations: random resized crop and horizontal flip."""
from __future__ import annotations

import math

import numpy as np

from .tiles import TileSample


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize of ``[c, h, w]`` (edge-clamped)."""
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        i0 = np.floor(pos).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, (pos - i0)

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    src = img.astype(np.float64)
    rows = src[:, y0, :] + fy[None, :, None] * (src[:, y1, :] - src[:, y0, :])
    out = rows[:, :, x0] + fx[None, None, :] * (rows[:, :, x1] - rows[:, :, x0])
    if img.dtype == np.uint8:
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out.astype(img.dtype)


def crop_box(h: int, w: int, area_range, aspect_range, rng, attempts: int = 10):
    """Sample ``(top, left, ch, cw)``; falls back to the largest centred square-ish crop."""
    area = h * w
    log_lo, log_hi = math.log(aspect_range[0]), math.log(aspect_range[1])
    for _ in range(attempts):
        target = area * rng.uniform(*area_range)
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    side = min(h, w)
    return (h - side) // 2, (w - side) // 2, side, side


def random_resized_crop(tile: TileSample, out_size: int, area_range=(0.2, 1.0),
                        aspect_range=(3 / 4, 4 / 3), seed=None) -> TileSample:
    if out_size <= 0:
        raise ValueError("out_size must be positive")
    if not (0 < area_range[0] <= area_range[1] and 0 < aspect_range[0] <= aspect_range[1]):
        raise ValueError("area and aspect ranges must be positive and ordered")
    rng = _rng(seed)
    top, left, ch, cw = crop_box(tile.height, tile.width, area_range, aspect_range, rng)
    crop = tile.data[:, top:top + ch, left:left + cw]
    return TileSample(tile.id, resize_bilinear(crop, out_size, out_size), tile.band_order)


def hflip(tile: TileSample, p: float = 0.5, seed=None) -> TileSample:
    rng = _rng(seed)
    if p > 0 and rng.random() < p:
        return TileSample(tile.id, np.ascontiguousarray(tile.data[:, :, ::-1]), tile.band_order)
    return tile


def augment_batch(images: np.ndarray, out_size: int, rng: np.random.Generator,
                  area_range=(0.2, 1.0), aspect_range=(3 / 4, 4 / 3), flip_p: float = 0.5) -> np.ndarray:
    """Crop+flip every image of a float ``[n, c, s, s]`` batch with one generator."""
    out = np.empty(images.shape[:2] + (out_size, out_size), dtype=images.dtype)
    for i, img in enumerate(images):
        top, left, ch, cw = crop_box(img.shape[1], img.shape[2], area_range, aspect_range, rng)
        res = resize_bilinear(img[:, top:top + ch, left:left + cw], out_size, out_size)
        if rng.random() < flip_p:
            res = res[:, :, ::-1]
        out[i] = res
    return out
