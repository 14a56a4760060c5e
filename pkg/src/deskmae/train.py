"""MAE pretraining driver, checkpoint <-> model glue, and the equivalence harness.

Everything a step consumes is a pure function of ``(root seed, step)``: the
epoch permutation, augmentation draws and mask shuffles. A checkpoint holding
parameters, optimizer moments and the step counter therefore resumes a run
bit for bit.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckio
from .config import RunConfig, derive_seed
from .data.augment import augment_batch
from .data.synthetic import BAND_ORDER, gen_synthetic
from .data.tiles import load_dataset
from .distributed import WorkerGroup
from .mae import MaeConfig, MaeModel, MaskPlan, make_masks
from .optim import OptimSpec, Optimizer, ScheduleSpec, lr_at, scale_lr
from .tasks import MetricsLog
from .tensor import no_grad
from .transfer import InflationSpec, inflate_state
from .vit import ViTModel, ViTRecipe, get_recipe

DTYPES = {"f32": np.float32, "f64": np.float64}
CHECKPOINT = "checkpoint.orkt"
FINAL = "final.orkt"


class CheckpointMismatchError(ValueError):
    """Checkpoint and model disagree; the message carries a remediation hint."""


# -- data --------------------------------------------------------------------
def load_images(cfg: RunConfig):
    """``(images f32 [n, c, s, s] in [0, 1], labels or None, masks or None)``."""
    d = cfg.data
    if d.path:
        images, labels, masks, _ = load_dataset(d.path)
        return images, labels, masks
    syn = gen_synthetic(d.kind, d.n, d.size, d.bands, derive_seed(cfg.seed, "data"), d.classes, d.nir_weight)
    return syn.images, syn.labels, syn.masks


def norm_stats(images: np.ndarray) -> tuple[list[float], list[float]]:
    x = images.astype(np.float64)
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    return mean.tolist(), np.where(std > 0, std, 1.0).tolist()


def normalize(images: np.ndarray, mean, std, dtype=np.float32) -> np.ndarray:
    m = np.asarray(mean, dtype=np.float64)[None, :, None, None]
    s = np.asarray(std, dtype=np.float64)[None, :, None, None]
    return ((images - m) / s).astype(dtype)


# -- recipe / model resolution -------------------------------------------------
def resolve_recipe(cfg: RunConfig) -> ViTRecipe:
    over = dict(cfg.recipe_overrides)
    over.setdefault("bands", cfg.data.bands)
    over.setdefault("image", cfg.data.size)
    return get_recipe(cfg.recipe, **over)


def resolve_mae(cfg: RunConfig, recipe: ViTRecipe) -> MaeConfig:
    base = MaeConfig.scaled_for(recipe.width, mask_ratio=cfg.mae.mask_ratio, norm_pix=cfg.mae.norm_pix)
    return MaeConfig(cfg.mae.mask_ratio,
                     cfg.mae.decoder_width or base.decoder_width,
                     cfg.mae.decoder_depth or base.decoder_depth,
                     cfg.mae.decoder_heads or base.decoder_heads,
                     cfg.mae.norm_pix)


def optim_spec(cfg: RunConfig) -> OptimSpec:
    o = cfg.optim
    return OptimSpec(o.kind, o.base_lr, o.betas, o.momentum, o.weight_decay, o.trust_coefficient, o.eps)


def recipe_from_meta(meta: dict) -> ViTRecipe:
    return ViTRecipe(**meta["recipe"])


def _sub(tensors: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}


def check_bands(ckpt: ckio.Checkpoint, bands: int, source: str = "checkpoint") -> None:
    have = int(ckpt.metadata["bands"])
    if have != bands:
        hint = (f"run `deskmae inflate --in {source} --bands {bands}` first" if bands > have
                else "use a checkpoint trained with matching bands")
        raise CheckpointMismatchError(f"{source} has {have}-band weights but the input has {bands} bands; {hint}")


def encoder_from_checkpoint(ckpt: ckio.Checkpoint) -> ViTModel:
    recipe = recipe_from_meta(ckpt.metadata)
    dtype = next(v for k, v in ckpt.tensors.items() if k.startswith("encoder.")).dtype
    enc = ViTModel(recipe, seed=0, dtype=dtype)
    enc.load_state_dict(_sub(ckpt.tensors, "encoder."))
    return enc


def model_tensors(model) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in model.named_parameters()}


def build_checkpoint(model: MaeModel, meta: dict, optim_state: dict | None = None) -> ckio.Checkpoint:
    tensors = model_tensors(model)
    if optim_state:
        tensors.update(optim_state)
    return ckio.Checkpoint(tensors, meta)


def inflate_checkpoint(ckpt: ckio.Checkpoint, bands: int, mode: str = "random", seed: int = 0,
                       std: float | None = None) -> ckio.Checkpoint:
    """Extend every band-dependent tensor to ``bands``; optimizer state is dropped."""
    meta = json.loads(json.dumps(ckpt.metadata))
    old = int(meta["bands"])
    spec = InflationSpec(bands, mode, seed, std)
    model = {k: v for k, v in ckpt.tensors.items() if not k.startswith("optim/")}
    out = inflate_state(model, int(meta["patch"]), spec)
    extra = bands - old
    meta["bands"] = bands
    meta["recipe"]["bands"] = bands
    if "norm_mean" in meta:
        meta["norm_mean"] = list(meta["norm_mean"]) + [0.0] * extra
        meta["norm_std"] = list(meta["norm_std"]) + [1.0] * extra
    order = list(meta.get("band_order", BAND_ORDER.get(old, ())))
    meta["band_order"] = order + (["NIR"] if extra == 1 and "NIR" not in order else [f"b{old + i}" for i in range(extra)])
    meta["inflated_from"] = {"bands": old, "mode": mode, "seed": seed}
    meta.pop("step", None)
    return ckio.Checkpoint(out, meta)


# -- pretraining ----------------------------------------------------------------
@dataclass
class PretrainResult:
    out_dir: Path
    steps: int
    total_steps: int
    losses: list[float] = field(default_factory=list)
    checkpoint: Path | None = None

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")


class Pretrainer:
    """Owns model, optimizer (or worker group), data and the step function for one run."""

    def __init__(self, cfg: RunConfig, images: np.ndarray | None = None):
        self.cfg = cfg
        self.recipe = resolve_recipe(cfg)
        self.mae_cfg = resolve_mae(cfg, self.recipe)
        self.dtype = DTYPES[cfg.dtype]
        raw = load_images(cfg)[0] if images is None else images
        if raw.shape[1] != self.recipe.bands:
            raise CheckpointMismatchError(
                f"data has {raw.shape[1]} bands but recipe {self.recipe.name} is configured for {self.recipe.bands}")
        self.raw = raw
        self.mean, self.std = norm_stats(raw)
        n, b = len(raw), cfg.batch_size
        if n < b:
            raise ValueError(f"dataset of {n} tiles is smaller than batch_size {b}")
        self.per_epoch = n // b
        self.total_steps = cfg.steps or max(1, int(round(cfg.schedule.epochs * self.per_epoch)))
        peak = scale_lr(cfg.optim.base_lr, b) if cfg.optim.scale_with_batch else cfg.optim.base_lr
        s = cfg.schedule
        total_epochs = self.total_steps / self.per_epoch
        self.sched = ScheduleSpec(s.kind, min(s.warmup_epochs, total_epochs / 2), total_epochs, peak,
                                  min(s.min_lr, peak), s.gamma, s.milestones)
        self.spec = optim_spec(cfg)
        self.seeds = {p: derive_seed(cfg.seed, p) for p in ("init", "order", "augment", "masking")}
        init = self._initial_state()
        self.group = None
        if cfg.workers.k > 1 or cfg.workers.strategy == "sharded":
            self.group = WorkerGroup(self._fresh_model, _mae_loss, cfg.workers.k, cfg.workers.strategy,
                                     self.spec, threads=cfg.workers.threads)
            if init is not None:
                self.group.load_state(init)
            self.model = self.group.models[0]
        else:
            self.model = self._fresh_model()
            if init is not None:
                self.model.load_state_dict(init)
            self.opt = Optimizer(list(self.model.named_parameters()), self.spec)
        self.step = 0

    def _fresh_model(self) -> MaeModel:
        return MaeModel.build(self.recipe, self.mae_cfg, seed=self.seeds["init"], dtype=self.dtype)

    def _initial_state(self):
        if not self.cfg.init_checkpoint:
            return None
        ckpt = ckio.load(self.cfg.init_checkpoint)
        check_bands(ckpt, self.recipe.bands, self.cfg.init_checkpoint)
        state = model_tensors(self._fresh_model())
        for k in state:
            if k in ckpt.tensors:
                if ckpt.tensors[k].shape != state[k].shape:
                    raise CheckpointMismatchError(
                        f"{k}: checkpoint shape {ckpt.tensors[k].shape} != model shape {state[k].shape}")
                state[k] = ckpt.tensors[k].astype(self.dtype)
        return state

    # -- per-step inputs (pure functions of seed and step) --
    def batch_indices(self, step: int) -> np.ndarray:
        epoch, i = divmod(step, self.per_epoch)
        perm = np.random.default_rng([self.seeds["order"], epoch]).permutation(len(self.raw))
        b = self.cfg.batch_size
        return perm[i * b:(i + 1) * b]

    def batch(self, step: int):
        idx = self.batch_indices(step)
        d = self.cfg.data
        rng = np.random.default_rng([self.seeds["augment"], step])
        x = self.raw[idx]
        if d.crop or d.flip_p > 0:
            area = d.area_range if d.crop else (1.0, 1.0)
            aspect = d.aspect_range if d.crop else (1.0, 1.0)
            x = augment_batch(x, self.recipe.image, rng, area, aspect, d.flip_p)
        x = normalize(x, self.mean, self.std, self.dtype)
        seeds = np.random.default_rng([self.seeds["masking"], step]).integers(0, 2 ** 32, size=len(idx))
        plan = make_masks(self.recipe.num_patches, self.mae_cfg.mask_ratio, seeds)
        return x, plan, idx

    def lr(self, step: int) -> float:
        return lr_at(self.sched, step / self.per_epoch)

    def loss_at(self, step: int) -> float:
        """Loss of the current parameters on step ``step``'s batch, without updating."""
        x, plan, _ = self.batch(step)
        with no_grad():
            return self.model.loss(x, plan).item()

    def train_step(self) -> float:
        x, plan, idx = self.batch(self.step)
        lr = self.lr(self.step)
        if self.group is not None:
            loss = self.group.step((x, plan.shuffle, plan.ids_restore), idx, lr)
        else:
            self.model.zero_grad()
            out = self.model.loss(x, plan)
            loss = out.item()
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at step {self.step}")
            out.backward()
            self.opt.step(lr)
        self.step += 1
        return loss

    # -- state --
    def optimizer_state(self) -> dict:
        return self.group.optimizer_state() if self.group is not None else self.opt.state_arrays()

    def params(self) -> dict[str, np.ndarray]:
        if self.group is not None and self.group.strategy == "sharded":
            flat = self.group.flat_params()
            return dict(zip(self.group.layout.names, [a.copy() for a in self.group.layout.unflatten(flat)]))
        return model_tensors(self.model)

    def metadata(self) -> dict:
        r = self.recipe
        return {"kind": "mae-pretrain", "run_id": self.cfg.run_id, "recipe": r.to_dict(), "bands": r.bands,
                "patch": r.patch, "image": r.image, "band_order": list(BAND_ORDER.get(r.bands, ())),
                "norm_mean": self.mean, "norm_std": self.std, "mask_ratio": self.mae_cfg.mask_ratio,
                "mae": self.mae_cfg.to_dict(), "step": self.step, "total_steps": self.total_steps,
                "config": self.cfg.to_dict()}

    def checkpoint(self) -> ckio.Checkpoint:
        tensors = self.params()
        tensors.update(self.optimizer_state())
        return ckio.Checkpoint(tensors, self.metadata())

    def restore(self, ckpt: ckio.Checkpoint) -> None:
        meta = ckpt.metadata
        if meta.get("total_steps") != self.total_steps or meta.get("recipe") != self.recipe.to_dict():
            raise CheckpointMismatchError("resume checkpoint belongs to a different run configuration; "
                                          "use a fresh output_dir")
        params = {k: v for k, v in ckpt.tensors.items() if not k.startswith("optim/")}
        optim = {k: v for k, v in ckpt.tensors.items() if k.startswith("optim/")}
        if self.group is not None:
            self.group.load_state(params, optim)
        else:
            self.model.load_state_dict(params)
            self.opt.load_state_arrays(optim)
        self.step = int(meta["step"])


def _mae_loss(model: MaeModel, batch, ids):
    x, shuffle, restore = batch
    keep = shuffle.shape[1] - int(math.floor(model.config.mask_ratio * shuffle.shape[1] + 0.5))
    return model.loss(x, MaskPlan(shuffle, restore, keep))


def pretrain(cfg: RunConfig, stop_after: int | None = None, resume: bool = True,
             images: np.ndarray | None = None) -> PretrainResult:
    """Run (or resume) MAE pretraining under ``cfg.output_dir``.

    Writes ``config.json`` (effective config), ``metrics.jsonl``,
    ``checkpoint.orkt`` (resumable) and, when finished, ``final.orkt``.
    ``stop_after`` halts after that many steps of this invocation.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.dumps())
    trainer = Pretrainer(cfg, images)
    log = MetricsLog(out / "metrics.jsonl")
    resumed = resume and (out / CHECKPOINT).exists()
    if resumed:
        trainer.restore(ckio.load(out / CHECKPOINT))
        kept = [r for r in log.records() if r.step < trainer.step]
        log.path.write_text("".join(json.dumps(vars(r)) + "\n" for r in kept))
    elif log.path.exists():
        log.path.unlink()
    losses = []
    end = trainer.total_steps if stop_after is None else min(trainer.total_steps, trainer.step + stop_after)
    while trainer.step < end:
        step = trainer.step
        lr = trainer.lr(step)
        loss = trainer.train_step()
        losses.append(loss)
        if step % cfg.log_every == 0 or trainer.step == trainer.total_steps:
            log.log(cfg.run_id, "pretrain", "loss", loss, step)
            log.log(cfg.run_id, "pretrain", "lr", lr, step)
        if cfg.checkpoint_every and trainer.step % cfg.checkpoint_every == 0:
            ckio.save(out / CHECKPOINT, trainer.checkpoint())
    ckpt = trainer.checkpoint()
    ckio.save(out / CHECKPOINT, ckpt)
    final = None
    if trainer.step >= trainer.total_steps:
        final = ckio.save(out / FINAL, ckpt)
    return PretrainResult(out, trainer.step, trainer.total_steps, losses, final)


# -- distributed equivalence harness ---------------------------------------------
@dataclass
class EquivalenceReport:
    k: int
    steps: int
    replicated_vs_sequential: float
    sharded_vs_replicated: float
    reproducible: bool
    tolerance: float = 1e-6

    @property
    def passed(self) -> bool:
        return (self.replicated_vs_sequential < self.tolerance and self.sharded_vs_replicated < self.tolerance
                and self.reproducible)

    def to_dict(self) -> dict:
        d = dict(vars(self))
        d["passed"] = self.passed
        return d


def relative_deviation(a: np.ndarray, b: np.ndarray) -> float:
    """``max|a - b| / max|b|`` over flat parameter vectors."""
    scale = float(np.max(np.abs(b)))
    return float(np.max(np.abs(a - b))) / (scale if scale > 0 else 1.0)


def ddp_check(k: int = 4, per_worker: int = 2, steps: int = 10, seed: int = 0,
              optim: OptimSpec | None = None) -> EquivalenceReport:
    """Sequential vs replicated vs sharded training of a 2-block f64 MAE model."""
    recipe = get_recipe("vit-micro")
    mcfg = MaeConfig(decoder_width=16, decoder_depth=1, decoder_heads=2)
    optim = optim or OptimSpec("adamw", base_lr=1e-3, betas=(0.9, 0.95), weight_decay=0.05)
    rng = np.random.default_rng(seed)
    batch = k * per_worker
    data = rng.standard_normal((steps, batch, recipe.bands, recipe.image, recipe.image))
    plans = [make_masks(recipe.num_patches, mcfg.mask_ratio, rng.integers(0, 2 ** 32, batch)) for _ in range(steps)]

    def make():
        return MaeModel.build(recipe, mcfg, seed=seed, dtype=np.float64)

    def run(k_, strategy):
        g = WorkerGroup(make, _mae_loss, k_, strategy, optim)
        for t in range(steps):
            g.step((data[t], plans[t].shuffle, plans[t].ids_restore), np.arange(batch), optim.base_lr)
        return g.flat_params()

    seq = run(1, "replicated")
    rep = run(k, "replicated")
    sha = run(k, "sharded")
    again = run(k, "sharded")
    rep2 = run(k, "replicated")
    return EquivalenceReport(k, steps, relative_deviation(rep, seq), relative_deviation(sha, rep),
                             bool(np.array_equal(sha, again) and np.array_equal(rep, rep2)))
