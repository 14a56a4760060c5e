"""Downstream adaptation, metrics and budget arithmetic."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .nn import Linear, Module
from .optim import (LayerDecaySpec, OptimSpec, Optimizer, ScheduleSpec, layer_scales, lr_at)
from .tensor import Tensor, cross_entropy, matmul, no_grad
from .vit import ViTModel, default_taps


# -- metrics ---------------------------------------------------------------
def confusion(pred, truth, k: int) -> np.ndarray:
    """``[k, k]`` counts, rows = truth, columns = prediction."""
    p = np.asarray(pred, dtype=np.int64).ravel()
    t = np.asarray(truth, dtype=np.int64).ravel()
    if p.shape != t.shape:
        raise ValueError(f"pred and truth differ in size: {p.size} vs {t.size}")
    if p.size == 0:
        raise ValueError("empty input")
    if min(p.min(), t.min()) < 0 or max(p.max(), t.max()) >= k:
        raise ValueError(f"labels outside [0, {k})")
    return _kernels.active.confusion(p, t, k)


def _num_classes(pred, truth, k):
    return k if k is not None else int(max(np.max(pred), np.max(truth))) + 1


def metric_top1(pred, truth) -> float:
    cm = confusion(pred, truth, _num_classes(pred, truth, None))
    return float(np.trace(cm) / cm.sum())


def _per_class(cm: np.ndarray):
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    present = (tp + fp + fn) > 0  # classes absent from both pred and truth drop out
    return tp, fp, fn, present


def metric_mf1(pred, truth, k: int | None = None) -> float:
    tp, fp, fn, present = _per_class(confusion(pred, truth, _num_classes(pred, truth, k)))
    return float(np.mean(2 * tp[present] / (2 * tp[present] + fp[present] + fn[present])))


def metric_miou(pred, truth, k: int | None = None) -> float:
    tp, fp, fn, present = _per_class(confusion(pred, truth, _num_classes(pred, truth, k)))
    return float(np.mean(tp[present] / (tp[present] + fp[present] + fn[present])))


# -- budgets and subsets -----------------------------------------------------
def format_count(x: float) -> str:
    """345600 -> '345.6k', 200169600 -> '200.2M'."""
    for div, suffix in ((1e9, "B"), (1e6, "M"), (1e3, "k")):
        if abs(x) >= div:
            return f"{x / div:.1f}{suffix}"
    return f"{x:g}"


@dataclass(frozen=True)
class BudgetReport:
    dataset_size: int
    epochs: int
    effective_batch: int
    iterations_at_bs1: int
    steps: int

    @property
    def display(self) -> str:
        return format_count(self.iterations_at_bs1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["display"] = self.display
        return d


def calc_budget(dataset_size: int, epochs: int, effective_batch: int = 1) -> BudgetReport:
    if min(dataset_size, epochs, effective_batch) < 1:
        raise ValueError("dataset_size, epochs and effective_batch must all be >= 1")
    return BudgetReport(dataset_size, epochs, effective_batch, dataset_size * epochs,
                        math.ceil(dataset_size / effective_batch) * epochs)


def subset_size(n: int, fraction: float) -> int:
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    return max(1, int(math.floor(fraction * n + 0.5)))


def subset_split(n: int, fraction: float, seed: int = 0) -> np.ndarray:
    """Sorted indices of a seeded random subset of ``round(fraction n)`` (>= 1) items."""
    k = subset_size(n, fraction)
    if k == n:
        return np.arange(n)
    return np.sort(np.random.default_rng(seed).choice(n, size=k, replace=False))


# -- metric records ----------------------------------------------------------
@dataclass
class MetricRecord:
    run_id: str
    task: str
    metric: str
    value: float
    step: int


class MetricsLog:
    """Append-only JSONL metric stream with CSV export."""

    FIELDS = ("run_id", "task", "metric", "value", "step")

    def __init__(self, path):
        self.path = Path(path)

    def log(self, run_id: str, task: str, metric: str, value: float, step: int) -> MetricRecord:
        rec = MetricRecord(run_id, task, metric, float(value), int(step))
        with open(self.path, "a") as fh:
            fh.write(json.dumps(asdict(rec)) + "\n")
        return rec

    def records(self) -> list[MetricRecord]:
        if not self.path.exists():
            return []
        return [MetricRecord(**json.loads(line)) for line in self.path.read_text().splitlines() if line.strip()]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.FIELDS)
            w.writeheader()
            for r in self.records():
                w.writerow(asdict(r))


# -- pooled features and probing --------------------------------------------
def pool_tokens(tokens: np.ndarray, has_cls: bool) -> np.ndarray:
    """cls token when present, else the mean over patch tokens."""
    return tokens[:, 0] if has_cls else tokens.mean(axis=1)


def extract_features(backbone: ViTModel, images: np.ndarray, batch: int = 128) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(images), batch):
            out.append(pool_tokens(backbone(images[i:i + batch]).data, backbone.recipe.cls_token))
    return np.concatenate(out).astype(np.float64)


class ProbeHead(Module):
    """Fixed feature standardisation followed by one affine map ``D -> k``."""

    def __init__(self, width: int, classes: int, seed: int = 0, dtype=np.float64):
        rng = np.random.default_rng(seed)
        self.fc = Linear(width, classes, rng, dtype, std=0.01)
        self._mu = np.zeros(width, dtype=dtype)
        self._sd = np.ones(width, dtype=dtype)

    def fit_stats(self, feats: np.ndarray) -> None:
        self._mu = feats.mean(axis=0).astype(self._mu.dtype)
        self._sd = (feats.std(axis=0) + 1e-6).astype(self._sd.dtype)

    def __call__(self, feats) -> Tensor:
        if isinstance(feats, Tensor):
            return self.fc((feats - Tensor(self._mu.astype(feats.dtype))) * Tensor((1.0 / self._sd).astype(feats.dtype)))
        x = (np.asarray(feats, dtype=self._mu.dtype) - self._mu) / self._sd
        return self.fc(Tensor(x))


@dataclass
class ProbeResult:
    head: ProbeHead
    train_accuracy: float
    accuracy: float
    losses: list[float] = field(default_factory=list)
    steps: int = 0
    backbone_checksum: str = ""


def train_head(head: ProbeHead, feats, labels, optim: OptimSpec, epochs: int, batch: int = 256,
               warmup_epochs: float = 0.0, seed: int = 0, steps: int | None = None) -> list[float]:
    """Minibatch training of ``head`` on fixed features; ``steps`` overrides ``epochs``."""
    n = len(feats)
    per_epoch = math.ceil(n / batch)
    total = steps if steps is not None else per_epoch * epochs
    sched = ScheduleSpec("cosine", warmup_epochs, max(total / per_epoch, warmup_epochs + 1e-9), optim.base_lr)
    opt = Optimizer(list(head.named_parameters()), optim)
    rng = np.random.default_rng(seed)
    losses, order, pos = [], rng.permutation(n), 0
    for step in range(total):
        if pos >= n:
            order, pos = rng.permutation(n), 0
        idx = order[pos:pos + batch]
        pos += batch
        opt.zero_grad()
        loss = cross_entropy(head(feats[idx]), labels[idx])
        if not np.isfinite(loss.item()):
            raise FloatingPointError(f"non-finite probe loss at step {step}")
        loss.backward()
        opt.step(lr_at(sched, step / per_epoch))
        losses.append(loss.item())
    return losses


def predict(head: ProbeHead, feats) -> np.ndarray:
    with no_grad():
        return np.argmax(head(feats).data, axis=1)


def linear_probe(backbone: ViTModel, train, test, optim: OptimSpec | None = None, epochs: int = 90,
                 batch: int = 256, warmup_epochs: float = 10.0, seed: int = 0,
                 classes: int | None = None) -> ProbeResult:
    """Train a linear classifier on frozen, pooled backbone features.

    ``train`` and ``test`` are ``(images, labels)``. The probe lr is used as
    given, without batch scaling.
    """
    optim = optim or OptimSpec("lars", base_lr=10.0, weight_decay=0.0)
    backbone.requires_grad_(False)
    before = backbone.checksum()
    ftr = extract_features(backbone, train[0])
    fte = extract_features(backbone, test[0])
    k = classes or int(max(train[1].max(), test[1].max())) + 1
    head = ProbeHead(ftr.shape[1], k, seed=seed)
    if ftr.shape[1] != head.fc.weight.shape[1]:
        raise ValueError(f"feature width {ftr.shape[1]} != head input {head.fc.weight.shape[1]}")
    head.fit_stats(ftr)
    losses = train_head(head, ftr, train[1], optim, epochs, batch, warmup_epochs, seed)
    after = backbone.checksum()
    if after != before:
        raise RuntimeError("backbone parameters changed during probing")
    return ProbeResult(head, metric_top1(predict(head, ftr), train[1]) if len(ftr) else 0.0,
                       float(np.mean(predict(head, fte) == test[1])), losses, len(losses), after)


# -- segmentation ------------------------------------------------------------
def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """``[n_out, n_in]`` half-pixel bilinear resampling matrix (edge-clamped)."""
    pos = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0, n_in - 1)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = pos - i0
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), i0), 1 - f)
    np.add.at(m, (np.arange(n_out), i1), f)
    return m


def resize_maps(x: Tensor, out: int) -> Tensor:
    """Bilinear resize of ``[B, C, h, w]`` square maps to ``out x out``."""
    h = x.shape[2]
    if h == out:
        return x
    r = resize_matrix(h, out).astype(x.dtype)
    y = matmul(x, Tensor(np.ascontiguousarray(r.T)))  # [B, C, h, out]
    y = matmul(y.transpose(0, 1, 3, 2), Tensor(np.ascontiguousarray(r.T)))  # [B, C, out, out] transposed
    return y.transpose(0, 1, 3, 2)


def tokens_to_map(tokens: Tensor, has_cls: bool) -> Tensor:
    """``[B, N(+1), D]`` -> ``[B, D, g, g]``."""
    if has_cls:
        tokens = tokens[:, 1:]
    b, n, d = tokens.shape
    g = int(round(math.sqrt(n)))
    if g * g != n:
        raise ValueError(f"{n} tokens do not form a square grid")
    return tokens.transpose(0, 2, 1).reshape(b, d, g, g)


class SegLiteDecoder(Module):
    """Sum-fused feature pyramid over four encoder taps.

    Each tap is projected ``D -> F``, resampled by its factor (4, 2, 1, 0.5
    of the token grid), brought to the finest level, summed and classified
    per pixel; logits are finally resized to the input image size.
    """

    FACTORS = (4.0, 2.0, 1.0, 0.5)

    def __init__(self, width: int, classes: int, channels: int = 64, seed: int = 0, dtype=np.float32,
                 factors=FACTORS):
        rng = np.random.default_rng(seed)
        self._factors = tuple(factors)
        self.proj = [Linear(width, channels, rng, dtype) for _ in self._factors]
        self.classifier = Linear(channels, classes, rng, dtype)

    def level_sizes(self, grid: int) -> list[int]:
        return [max(1, int(round(grid * f))) for f in self._factors]

    def __call__(self, taps, image_size: int, has_cls: bool) -> Tensor:
        if len(taps) != len(self._factors):
            raise ValueError(f"expected {len(self._factors)} taps, got {len(taps)}")
        maps = [tokens_to_map(proj(t), has_cls) for proj, t in zip(self.proj, taps)]
        sizes = self.level_sizes(maps[0].shape[2])
        finest = max(sizes)
        fused = None
        for m, s in zip(maps, sizes):
            lvl = resize_maps(resize_maps(m, s), finest)
            fused = lvl if fused is None else fused + lvl
        logits = self.classifier(fused.transpose(0, 2, 3, 1))  # [B, h, w, k]
        return resize_maps(logits.transpose(0, 3, 1, 2), image_size)


def seg_forward(backbone: ViTModel, decoder: SegLiteDecoder, x: np.ndarray, taps=None) -> Tensor:
    """Per-pixel logits ``[B, k, s, s]``."""
    feats = backbone.forward_features(x, taps or default_taps(backbone.recipe.depth))
    return decoder(feats, x.shape[-1], backbone.recipe.cls_token)


def pixel_cross_entropy(logits: Tensor, masks: np.ndarray) -> Tensor:
    b, k, h, w = logits.shape
    flat = logits.transpose(0, 2, 3, 1).reshape(b * h * w, k)
    return cross_entropy(flat, np.asarray(masks).reshape(-1))


# -- finetuning --------------------------------------------------------------
@dataclass
class FinetuneResult:
    metrics: dict[str, float]
    losses: list[float]
    steps: int


def finetune(backbone: ViTModel, head: Module, train, test, mode: str = "full",
             optim: OptimSpec = OptimSpec("adamw", base_lr=1e-3, betas=(0.9, 0.999)),
             sched: ScheduleSpec | None = None, layer_decay: LayerDecaySpec | None = None,
             steps: int = 100, batch: int = 16, seed: int = 0, task: str = "segmentation",
             taps=None) -> FinetuneResult:
    """Supervised adaptation for a fixed number of optimizer steps.

    ``mode='frozen'`` trains only ``head``; ``'full'`` also trains the backbone,
    with per-group lr multipliers from ``layer_decay``. ``task`` selects the
    head call and metrics: ``segmentation`` (SegLiteDecoder, mIoU/mF1) or
    ``classification`` (ProbeHead over pooled tokens, top-1).
    """
    if mode not in ("frozen", "full"):
        raise ValueError(f"unknown finetune mode {mode!r}")
    if task not in ("segmentation", "classification"):
        raise ValueError(f"unknown task {task!r}")
    x_tr, y_tr = train
    n = len(x_tr)
    per_epoch = math.ceil(n / batch)
    sched = sched or ScheduleSpec("cosine", 0.0, steps / per_epoch, optim.base_lr)
    backbone.requires_grad_(mode == "full")
    named = [(f"head.{k}", p) for k, p in head.named_parameters()]
    scales = {}
    if mode == "full":
        bb = list(backbone.named_parameters())
        scales = layer_scales(backbone, layer_decay, [k for k, _ in bb])
        named = bb + named  # head params sit in the top group: multiplier 1
    opt = Optimizer(named, optim, scales)
    rng = np.random.default_rng(seed)
    has_cls = backbone.recipe.cls_token
    losses, order, pos, done = [], rng.permutation(n), 0, 0
    for step in range(steps):
        if pos + batch > n and pos > 0:
            order, pos = rng.permutation(n), 0
        idx = order[pos:pos + batch]
        pos += batch
        opt.zero_grad()
        backbone.zero_grad()
        if task == "segmentation":
            loss = pixel_cross_entropy(seg_forward(backbone, head, x_tr[idx], taps), y_tr[idx])
        else:
            tokens = backbone(x_tr[idx])
            pooled = tokens[:, 0] if has_cls else tokens.mean(axis=1)
            loss = cross_entropy(head(pooled), y_tr[idx])
        if not np.isfinite(loss.item()):
            raise FloatingPointError(f"non-finite loss at step {step}")
        loss.backward()
        opt.step(lr_at(sched, step / per_epoch))
        losses.append(loss.item())
        done += 1
    if done != steps:
        raise RuntimeError(f"ran {done} steps, expected {steps}")
    return FinetuneResult(evaluate(backbone, head, test, task, taps), losses, done)


def evaluate(backbone: ViTModel, head: Module, data, task: str, taps=None, batch: int = 32) -> dict[str, float]:
    x, y = data
    preds = []
    with no_grad():
        for i in range(0, len(x), batch):
            xb = x[i:i + batch]
            if task == "segmentation":
                preds.append(np.argmax(seg_forward(backbone, head, xb, taps).data, axis=1))
            else:
                tokens = backbone(xb).data
                pooled = pool_tokens(tokens, backbone.recipe.cls_token)
                logits = head(Tensor(pooled))
                preds.append(np.argmax(logits.data, axis=1))
    pred = np.concatenate(preds)
    if task == "segmentation":
        k = head.classifier.weight.shape[0]
        return {"miou": metric_miou(pred, y, k), "mf1": metric_mf1(pred, y, k),
                "pixel_accuracy": float(np.mean(pred == y))}
    return {"top1": float(np.mean(pred == y))}
