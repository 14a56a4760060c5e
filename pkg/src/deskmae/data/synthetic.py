"""Seeded synthetic tile generators standing in for real imagery.

``classification``
    one shape per tile; the class picks the shape (square, disk, cross,
    stripes), colours are random so that the class lives in geometry, not
    in band statistics.
``segmentation``
    blobs of ``classes - 1`` land-cover types on class-0 background; each
    class has a fixed spectral signature plus noise, so masks are
    recoverable pixel by pixel.
``texture``
    unlabelled oriented-sinusoid textures for pretraining.

Band order is R, G, B(, NIR) so that a 3-band set equals the first three
bands of the 4-band set with the same seed. The NIR band is ``nir_weight``
times the mean visible band plus weak noise.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tiles import TileSample

KINDS = ("classification", "segmentation", "texture")
SHAPES = ("square", "disk", "cross", "stripes")
BAND_ORDER = {3: ("R", "G", "B"), 4: ("R", "G", "B", "NIR")}


@dataclass
class SyntheticSet:
    images: np.ndarray  # f32 [n, bands, size, size] in [0, 1]
    labels: np.ndarray | None  # [n] class ids (classification)
    masks: np.ndarray | None  # [n, size, size] (segmentation)
    kind: str

    def tiles(self, prefix: str = "syn") -> list[TileSample]:
        order = BAND_ORDER[self.images.shape[1]]
        return [TileSample(f"{prefix}{i:06d}", np.ascontiguousarray(img), order)
                for i, img in enumerate(self.images)]


def _shape_mask(shape: str, size: int, rng) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    r = rng.uniform(0.22, 0.38) * size
    cy, cx = rng.uniform(r, size - r, size=2)
    dy, dx = yy - cy, xx - cx
    if shape == "square":
        return (np.abs(dy) <= r * 0.8) & (np.abs(dx) <= r * 0.8)
    if shape == "disk":
        return dy ** 2 + dx ** 2 <= r ** 2
    if shape == "cross":
        arm = max(1.0, r * 0.3)
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))
    period = rng.uniform(3.0, 5.0)
    theta = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * (dy * np.cos(theta) + dx * np.sin(theta)) / period + phase) > 0
    return wave & (np.abs(dy) <= r) & (np.abs(dx) <= r)


def _add_nir(rgb: np.ndarray, bands: int, nir_weight: float, rng) -> np.ndarray:
    # noise is drawn either way so 3- and 4-band sets share their visible bands
    nir = nir_weight * rgb.mean(axis=0) + 0.02 * rng.standard_normal(rgb.shape[1:])
    return rgb if bands == 3 else np.concatenate([rgb, nir[None]])


def _classification(n, size, bands, classes, rng, nir_weight):
    if classes > len(SHAPES):
        raise ValueError(f"classification supports up to {len(SHAPES)} classes")
    labels = np.repeat(np.arange(classes), -(-n // classes))[:n]
    labels = labels[rng.permutation(n)]
    images = np.empty((n, bands, size, size), dtype=np.float32)
    for i, k in enumerate(labels):
        bg = rng.uniform(0.1, 0.9, size=3)
        fg = rng.uniform(0.1, 0.9, size=3)
        while np.abs(fg - bg).max() < 0.3:
            fg = rng.uniform(0.1, 0.9, size=3)
        m = _shape_mask(SHAPES[k], size, rng)
        rgb = np.where(m[None], fg[:, None, None], bg[:, None, None])
        rgb = rgb + 0.04 * rng.standard_normal(rgb.shape)
        images[i] = np.clip(_add_nir(rgb, bands, nir_weight, rng), 0, 1)
    return images, labels


def _segmentation(n, size, bands, classes, rng, nir_weight):
    sig = np.random.default_rng(12345).uniform(0.05, 0.95, size=(classes, 3))
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    images = np.empty((n, bands, size, size), dtype=np.float32)
    masks = np.zeros((n, size, size), dtype=np.int64)
    for i in range(n):
        m = np.zeros((size, size), dtype=np.int64)
        for _ in range(int(rng.integers(2, 6))):
            k = int(rng.integers(1, classes)) if classes > 1 else 0
            r = rng.uniform(0.1, 0.3) * size
            cy, cx = rng.uniform(0, size, size=2)
            if rng.random() < 0.5:
                blob = (yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2
            else:
                blob = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r * rng.uniform(0.5, 1.5))
            m[blob] = k
        rgb = sig[m].transpose(2, 0, 1) + 0.05 * rng.standard_normal((3, size, size))
        images[i] = np.clip(_add_nir(rgb, bands, nir_weight, rng), 0, 1)
        masks[i] = m
    return images, masks


def _texture(n, size, bands, rng, nir_weight):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images = np.empty((n, bands, size, size), dtype=np.float32)
    for i in range(n):
        rgb = np.empty((3, size, size))
        theta, period = rng.uniform(0, np.pi), rng.uniform(3, size / 2)
        wave = np.sin(2 * np.pi * (yy * np.cos(theta) + xx * np.sin(theta)) / period + rng.uniform(0, 2 * np.pi))
        for b in range(3):
            rgb[b] = rng.uniform(0.3, 0.7) + rng.uniform(0.05, 0.25) * wave
        rgb += 0.03 * rng.standard_normal(rgb.shape)
        images[i] = np.clip(_add_nir(rgb, bands, nir_weight, rng), 0, 1)
    return images


def gen_synthetic(kind: str, n: int, size: int = 32, bands: int = 4, seed: int = 0,
                  classes: int = 4, nir_weight: float = 0.8) -> SyntheticSet:
    if bands not in (3, 4):
        raise ValueError(f"synthetic tiles have 3 or 4 bands, got {bands}")
    if kind not in KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}; choose from {KINDS}")
    if n < 1:
        raise ValueError("n must be >= 1")
    if classes < 1:
        raise ValueError("classes must be >= 1")
    rng = np.random.default_rng(seed)
    if kind == "classification":
        images, labels = _classification(n, size, bands, classes, rng, nir_weight)
        return SyntheticSet(images, labels, None, kind)
    if kind == "segmentation":
        images, masks = _segmentation(n, size, bands, classes, rng, nir_weight)
        return SyntheticSet(images, None, masks, kind)
    return SyntheticSet(_texture(n, size, bands, rng, nir_weight), None, None, kind)
