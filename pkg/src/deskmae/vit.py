"""Vision Transformer encoder built from named shape recipes."""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from .nn import Block, LayerNorm, Module, param, xavier_uniform
from .tensor import Tensor, concat, broadcast_to, gather, patch_project


@dataclass(frozen=True)
class ViTRecipe:
    name: str
    width: int
    depth: int
    mlp: int
    heads: int
    patch: int
    bands: int = 3
    image: int = 224
    cls_token: bool = True

    def __post_init__(self):
        for f in ("width", "depth", "mlp", "heads", "patch", "bands", "image"):
            if getattr(self, f) <= 0:
                raise ValueError(f"recipe {self.name}: {f} must be positive")
        if self.width % self.heads:
            raise ValueError(f"recipe {self.name}: width {self.width} not divisible by heads {self.heads}")

    @property
    def grid(self) -> int:
        return validate_input_size(self.image, self.patch)

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    def with_(self, **kw) -> "ViTRecipe":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


RECIPES: dict[str, ViTRecipe] = {
    "vit-b": ViTRecipe("vit-b", 768, 12, 3072, 12, 16),
    "vit-h": ViTRecipe("vit-h", 1280, 32, 5120, 16, 14),
    "vit-g": ViTRecipe("vit-g", 1536, 32, 6144, 16, 14),
    "vit-e": ViTRecipe("vit-e", 2816, 32, 11264, 32, 14),
    # desk-scale shapes
    "vit-tiny": ViTRecipe("vit-tiny", 128, 4, 512, 4, 4, bands=4, image=32),
    "vit-micro": ViTRecipe("vit-micro", 32, 2, 64, 2, 4, bands=3, image=16),
}

# reference counts quoted for the four large recipes
REFERENCE_PARAMS = {"vit-b": 87_000_000, "vit-h": 635_000_000, "vit-g": 914_000_000, "vit-e": 3_067_000_000}

DEFAULT_TAPS = {12: (3, 5, 7, 11), 32: (11, 17, 23, 31)}


def get_recipe(name: str, **overrides) -> ViTRecipe:
    try:
        base = RECIPES[name.lower()]
    except KeyError:
        raise KeyError(f"unknown recipe {name!r}; known: {sorted(RECIPES)}") from None
    return base.with_(**overrides) if overrides else base


class InputSizeError(ValueError):
    def __init__(self, size: int, patch: int):
        self.size, self.patch = size, patch
        self.suggestion = (size // patch) * patch
        super().__init__(
            f"image size {size} is not a multiple of patch {patch} "
            f"(non-integer patch grid); nearest smaller valid size is {self.suggestion}")


def validate_input_size(size: int, patch: int) -> int:
    """Return the patch-grid side for a square input, or raise InputSizeError."""
    if size <= 0 or patch <= 0:
        raise ValueError("size and patch must be positive")
    if size % patch:
        raise InputSizeError(size, patch)
    return size // patch


def block_params(width: int, mlp: int) -> int:
    attn = 4 * width * width + 4 * width
    ffn = 2 * width * mlp + width + mlp
    norms = 4 * width
    return attn + ffn + norms


def count_params(recipe: ViTRecipe, convention: str = "encoder_only", mae=None,
                 include_fixed_tables: bool = False) -> int:
    """Closed-form parameter count.

    ``encoder_plus_decoder`` adds the MAE decoder described by ``mae``
    (a MaeConfig; defaults to the standard decoder). ``include_fixed_tables``
    also counts the frozen sin-cos position tables, which common MAE code
    registers as non-trainable parameters and therefore includes in totals.
    """
    d, c, p = recipe.width, recipe.bands, recipe.patch
    tokens = recipe.num_patches + (1 if recipe.cls_token else 0)
    n = c * p * p * d + d
    if include_fixed_tables:
        n += tokens * d
    if recipe.cls_token:
        n += d
    n += recipe.depth * block_params(d, recipe.mlp)
    n += 2 * d
    if convention == "encoder_only":
        return n
    if convention != "encoder_plus_decoder":
        raise ValueError(f"unknown convention {convention!r}")
    from .mae import MaeConfig

    cfg = mae or MaeConfig()
    dd = cfg.decoder_width
    n += d * dd + dd  # decoder embed
    n += dd  # mask token
    n += cfg.decoder_depth * block_params(dd, cfg.decoder_mlp)
    n += 2 * dd
    n += dd * p * p * c + p * p * c
    if include_fixed_tables:
        n += tokens * dd
    return n


def sincos_pos_embed(grid: int, width: int, cls_token: bool = False) -> np.ndarray:
    """Fixed 2-D sine-cosine table of shape ``[1, grid**2 (+1), width]``.

    Half the lanes encode the row coordinate and half the column; within each
    half the first quarter-width lanes are sines and the rest cosines. The cls
    slot, when present, is all zeros.
    """
    if width % 4:
        raise ValueError(f"width {width} must be divisible by 4 for a 2-D sin-cos table")
    quarter = width // 4
    omega = 1.0 / 10000 ** (np.arange(quarter, dtype=np.float64) / quarter)
    rows, cols = np.meshgrid(np.arange(grid, dtype=np.float64), np.arange(grid, dtype=np.float64), indexing="ij")

    def encode(pos):
        out = np.outer(pos.reshape(-1), omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    table = np.concatenate([encode(rows), encode(cols)], axis=1)
    if cls_token:
        table = np.concatenate([np.zeros((1, width)), table], axis=0)
    return table[None]


def default_taps(depth: int) -> tuple[int, ...]:
    try:
        return DEFAULT_TAPS[depth]
    except KeyError:
        raise ValueError(f"no default feature taps for depth {depth}; pass taps explicitly") from None


def planar_patches(x: np.ndarray, patch: int) -> np.ndarray:
    """``[B, c, s, s]`` -> ``[B, N, c, p*p]`` (row-major patch order)."""
    b, c, h, w = x.shape
    if h != w:
        raise ValueError(f"square inputs only, got {h}x{w}")
    g = validate_input_size(h, patch)
    t = x.reshape(b, c, g, patch, g, patch).transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(t).reshape(b, g * g, c, patch * patch)


class ViTModel(Module):
    def __init__(self, recipe: ViTRecipe, seed: int = 0, dtype=np.float32):
        self._recipe = recipe
        self._dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        d, c, p = recipe.width, recipe.bands, recipe.patch
        w = xavier_uniform(rng, d, c * p * p).reshape(d, c, p, p)
        self.patch_embed_weight = param(w, dtype)
        self.patch_embed_bias = param(np.zeros(d), dtype)
        if recipe.cls_token:
            self.cls_token = param(rng.normal(0.0, 0.02, size=(1, 1, d)), dtype)
        self.blocks = [Block(d, recipe.heads, recipe.mlp, rng, dtype) for _ in range(recipe.depth)]
        self.norm = LayerNorm(d, dtype)
        self._pos = sincos_pos_embed(recipe.grid, d, recipe.cls_token).astype(dtype)

    @property
    def recipe(self) -> ViTRecipe:
        return self._recipe

    @property
    def dtype(self):
        return self._dtype

    @property
    def pos_embed(self) -> np.ndarray:
        return self._pos

    def embed(self, x: np.ndarray) -> Tensor:
        """Patch tokens plus positional table, without the cls token: ``[B, N, D]``."""
        x = np.asarray(x, dtype=self._dtype)
        if x.ndim != 4 or x.shape[1] != self._recipe.bands:
            raise ValueError(
                f"input shape {x.shape} does not match recipe {self._recipe.name} with {self._recipe.bands} bands")
        if x.shape[2] != self._recipe.image:
            raise ValueError(f"input size {x.shape[2]} != recipe image size {self._recipe.image}")
        tokens = patch_project(planar_patches(x, self._recipe.patch), self.patch_embed_weight, self.patch_embed_bias)
        pos = self._pos[:, 1:] if self._recipe.cls_token else self._pos
        return tokens + Tensor(pos)

    def prepend_cls(self, tokens: Tensor) -> Tensor:
        if not self._recipe.cls_token:
            return tokens
        cls = self.cls_token + Tensor(self._pos[:, :1])
        return concat([broadcast_to(cls, (tokens.shape[0], 1, tokens.shape[2])), tokens], axis=1)

    def encode_tokens(self, tokens: Tensor, taps=()) -> tuple[Tensor, list[Tensor]]:
        feats = []
        taps = set(taps)
        for i, blk in enumerate(self.blocks):
            tokens = blk(tokens)
            if i in taps:
                feats.append(tokens)
        return tokens, feats

    def forward_features(self, x: np.ndarray, taps=None, ids_keep: np.ndarray | None = None) -> list[Tensor]:
        """Post-block activations at each tap index, ``[B, N(+1), D]`` each."""
        taps = list(default_taps(self._recipe.depth) if taps is None else taps)
        if not taps:
            raise ValueError("at least one tap required")
        if any(b <= a for a, b in zip(taps, taps[1:])):
            raise ValueError(f"taps must be strictly increasing, got {taps}")
        if taps[0] < 0 or taps[-1] >= self._recipe.depth:
            raise IndexError(f"tap out of range for depth {self._recipe.depth}: {taps}")
        tokens = self.embed(x)
        if ids_keep is not None:
            tokens = gather(tokens, ids_keep)
        _, feats = self.encode_tokens(self.prepend_cls(tokens), taps)
        return feats

    def __call__(self, x: np.ndarray, ids_keep: np.ndarray | None = None) -> Tensor:
        """Full encoder: final-normed tokens ``[B, N(+1), D]``."""
        tokens = self.embed(x)
        if ids_keep is not None:
            tokens = gather(tokens, ids_keep)
        out, _ = self.encode_tokens(self.prepend_cls(tokens))
        return self.norm(out)

    def param_group(self, name: str) -> int:
        """Layer-decay group: embeddings 0, block i -> i+1, everything after -> depth+1."""
        if name.startswith(("patch_embed", "cls_token")):
            return 0
        if name.startswith("blocks."):
            return int(name.split(".")[1]) + 1
        return self._recipe.depth + 1
