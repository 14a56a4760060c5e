"""Masked-autoencoder objective: masking, decoder, reconstruction loss."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .nn import Block, LayerNorm, Linear, Module, param
from .tensor import Tensor, broadcast_to, concat, gather, mse_loss
from .vit import ViTModel, sincos_pos_embed, validate_input_size


@dataclass(frozen=True)
class MaeConfig:
    mask_ratio: float = 0.75
    decoder_width: int = 512
    decoder_depth: int = 8
    decoder_heads: int = 16
    norm_pix: bool = True

    def __post_init__(self):
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must be in (0, 1), got {self.mask_ratio}")
        if self.decoder_width % self.decoder_heads:
            raise ValueError("decoder_width must be divisible by decoder_heads")

    @property
    def decoder_mlp(self) -> int:
        return 4 * self.decoder_width

    @classmethod
    def scaled_for(cls, width: int, **kw) -> "MaeConfig":
        """Shrink the standard 512/8/16 decoder in proportion to an encoder of ``width``.

        The standard decoder is paired with a 1024-wide encoder; widths at or
        above that keep it unchanged.
        """
        f = min(1.0, width / 1024)
        heads = max(1, round(16 * f))
        dw = max(heads * 4, int(round(512 * f / heads)) * heads)
        depth = max(1, round(8 * f))
        return cls(decoder_width=dw, decoder_depth=depth, decoder_heads=heads, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


def masked_count(n: int, ratio: float) -> int:
    """Round-half-up of ``ratio * n``."""
    return int(math.floor(ratio * n + 0.5))


@dataclass
class MaskPlan:
    """Per-sample shuffle of N patches. Arrays are ``[N]`` or ``[B, N]``-shaped."""

    shuffle: np.ndarray
    ids_restore: np.ndarray
    keep: int

    @property
    def num_patches(self) -> int:
        return self.shuffle.shape[-1]

    @property
    def ids_keep(self) -> np.ndarray:
        return self.shuffle[..., : self.keep]

    @property
    def ids_mask(self) -> np.ndarray:
        return self.shuffle[..., self.keep:]

    @property
    def mask(self) -> np.ndarray:
        """1.0 at masked positions, in original patch order."""
        m = np.ones(self.shuffle.shape, dtype=np.float64)
        m[..., : self.keep] = 0.0
        return np.take_along_axis(m, self.ids_restore, axis=-1)

    def batched(self, b: int) -> "MaskPlan":
        if self.shuffle.ndim == 2:
            if self.shuffle.shape[0] != b:
                raise ValueError(f"plan has batch {self.shuffle.shape[0]}, input has {b}")
            return self
        return MaskPlan(np.tile(self.shuffle, (b, 1)), np.tile(self.ids_restore, (b, 1)), self.keep)


def make_mask(n: int, ratio: float, seed: int) -> MaskPlan:
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must be in (0, 1), got {ratio}")
    if n < 2:
        raise ValueError(f"need at least 2 patches to mask, got {n}")
    n_mask = masked_count(n, ratio)
    if n_mask < 1 or n_mask >= n:
        raise ValueError(f"ratio {ratio} on {n} patches masks {n_mask}; need 1..{n - 1}")
    noise = np.random.default_rng(seed).random(n)
    shuffle = np.argsort(noise, kind="stable")
    return MaskPlan(shuffle, np.argsort(shuffle, kind="stable"), n - n_mask)


def make_masks(n: int, ratio: float, seeds) -> MaskPlan:
    plans = [make_mask(n, ratio, int(s)) for s in seeds]
    return MaskPlan(np.stack([p.shuffle for p in plans]), np.stack([p.ids_restore for p in plans]), plans[0].keep)


def patchify(x: np.ndarray, patch: int) -> np.ndarray:
    """``[B, c, s, s]`` -> ``[B, N, p*p*c]`` with pixel-major, band-minor layout."""
    b, c, h, w = x.shape
    if h != w:
        raise ValueError(f"square inputs only, got {h}x{w}")
    g = validate_input_size(h, patch)
    t = x.reshape(b, c, g, patch, g, patch).transpose(0, 2, 4, 3, 5, 1)
    return np.ascontiguousarray(t).reshape(b, g * g, patch * patch * c)


def unpatchify(patches: np.ndarray, patch: int, bands: int) -> np.ndarray:
    b, n, f = patches.shape
    g = int(round(math.sqrt(n)))
    if g * g != n or f != patch * patch * bands:
        raise ValueError(f"cannot unpatchify {patches.shape} with patch {patch} and {bands} bands")
    t = patches.reshape(b, g, g, patch, patch, bands).transpose(0, 5, 1, 3, 2, 4)
    return np.ascontiguousarray(t).reshape(b, bands, g * patch, g * patch)


def pixel_targets(x: np.ndarray, patch: int, norm_pix: bool, eps: float = 1e-6) -> np.ndarray:
    t = patchify(x, patch)
    if norm_pix:
        mu = t.mean(axis=-1, keepdims=True)
        var = t.var(axis=-1, keepdims=True)
        t = (t - mu) / np.sqrt(var + eps)
    return t


class MaeDecoder(Module):
    def __init__(self, encoder_width: int, grid: int, patch: int, bands: int, cfg: MaeConfig,
                 seed: int = 1, dtype=np.float32):
        rng = np.random.default_rng(seed)
        dd = cfg.decoder_width
        self._cfg = cfg
        self._patch, self._bands = patch, bands
        self.decoder_embed = Linear(encoder_width, dd, rng, dtype)
        self.mask_token = param(rng.normal(0.0, 0.02, size=(1, 1, dd)), dtype)
        self.decoder_blocks = [Block(dd, cfg.decoder_heads, cfg.decoder_mlp, rng, dtype)
                               for _ in range(cfg.decoder_depth)]
        self.decoder_norm = LayerNorm(dd, dtype)
        self.decoder_pred = Linear(dd, patch * patch * bands, rng, dtype)
        self._pos = sincos_pos_embed(grid, dd, cls_token=True).astype(dtype)

    @property
    def config(self) -> MaeConfig:
        return self._cfg

    def __call__(self, latent: Tensor, plan: MaskPlan, has_cls: bool) -> Tensor:
        x = self.decoder_embed(latent)
        b, _, dd = x.shape
        n = plan.num_patches
        start = 1 if has_cls else 0
        visible = x[:, start:]
        mask_tokens = broadcast_to(self.mask_token, (b, n - plan.keep, dd))
        full = gather(concat([visible, mask_tokens], axis=1), plan.ids_restore)
        if has_cls:
            full = concat([x[:, :1], full], axis=1)
            full = full + Tensor(self._pos)
        else:
            full = full + Tensor(self._pos[:, 1:])
        for blk in self.decoder_blocks:
            full = blk(full)
        pred = self.decoder_pred(self.decoder_norm(full))
        return pred[:, start:] if has_cls else pred


def build_mae(model: ViTModel, cfg: MaeConfig, seed: int = 1) -> MaeDecoder:
    r = model.recipe
    return MaeDecoder(r.width, r.grid, r.patch, r.bands, cfg, seed=seed, dtype=model.dtype)


def mae_forward(model: ViTModel, decoder: MaeDecoder, x: np.ndarray, plan: MaskPlan,
                norm_pix: bool | None = None, targets: np.ndarray | None = None):
    """Returns ``(pred [B, N, p*p*c], loss)``; loss averages over masked patches only."""
    x = np.asarray(x, dtype=model.dtype)
    r = model.recipe
    if plan.num_patches != r.num_patches:
        raise ValueError(f"mask plan covers {plan.num_patches} patches, model grid has {r.num_patches}")
    plan = plan.batched(x.shape[0])
    latent = model(x, ids_keep=plan.ids_keep)
    pred = decoder(latent, plan, r.cls_token)
    if targets is None:
        norm = decoder.config.norm_pix if norm_pix is None else norm_pix
        targets = pixel_targets(x, r.patch, norm)
    loss = mse_loss(pred, targets.astype(model.dtype, copy=False), plan.mask)
    return pred, loss


class MaeModel(Module):
    """Encoder and decoder under one parameter namespace (``encoder.*``, ``decoder.*``)."""

    def __init__(self, encoder: ViTModel, decoder: MaeDecoder):
        self.encoder = encoder
        self.decoder = decoder

    @classmethod
    def build(cls, recipe, cfg: MaeConfig, seed: int = 0, dtype=np.float32) -> "MaeModel":
        enc = ViTModel(recipe, seed=seed, dtype=dtype)
        return cls(enc, build_mae(enc, cfg, seed=seed + 1))

    @property
    def recipe(self):
        return self.encoder.recipe

    @property
    def config(self) -> MaeConfig:
        return self.decoder.config

    def param_group(self, name: str) -> int:
        if name.startswith("encoder."):
            return self.encoder.param_group(name[len("encoder."):])
        return self.recipe.depth + 1

    def loss(self, x: np.ndarray, plan: MaskPlan) -> Tensor:
        return mae_forward(self.encoder, self.decoder, x, plan)[1]
