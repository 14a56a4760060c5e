"""Multispectral tile container (``.mtil``) and dataset directories.

Layout, little-endian::

    magic     4s   b"MTIL"
    version   u16  1
    width     u32
    height    u32
    bands     u16
    dtype     u8   0 = u8, 1 = f32
    tag_len   u8   length of the band-order tag
    tag       ascii, comma-separated band names (e.g. "B,G,R,NIR")
    data      planar: bands x height x width
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"MTIL"
VERSION = 1
_HEAD = struct.Struct("<4sHIIHBB")
_DTYPE_CODES = {0: np.dtype("<u1"), 1: np.dtype("<f4")}
_CODE_OF = {np.dtype(np.uint8): 0, np.dtype(np.float32): 1}
DEFAULT_ORDER = {1: ("L",), 3: ("R", "G", "B"), 4: ("B", "G", "R", "NIR")}


class TileFormatError(ValueError):
    pass


@dataclass
class TileSample:
    id: str
    data: np.ndarray  # [bands, height, width]
    band_order: tuple[str, ...] = ()

    def __post_init__(self):
        if self.data.ndim != 3:
            raise TileFormatError(f"tile {self.id}: expected [bands, H, W], got {self.data.shape}")
        if self.data.dtype not in _CODE_OF:
            raise TileFormatError(f"tile {self.id}: dtype {self.data.dtype} not in (uint8, float32)")
        if not self.band_order:
            self.band_order = DEFAULT_ORDER.get(self.bands, tuple(f"b{i}" for i in range(self.bands)))
        if len(self.band_order) != self.bands:
            raise TileFormatError(f"tile {self.id}: {len(self.band_order)} band names for {self.bands} bands")

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def as_float(self) -> np.ndarray:
        """f32 in [0, 1] for u8 tiles; f32 passthrough otherwise."""
        if self.data.dtype == np.uint8:
            return self.data.astype(np.float32) / np.float32(255.0)
        return self.data.astype(np.float32, copy=False)


def encode_tile(tile: TileSample) -> bytes:
    tag = ",".join(tile.band_order).encode("ascii")
    if len(tag) > 255:
        raise TileFormatError("band-order tag longer than 255 bytes")
    head = _HEAD.pack(MAGIC, VERSION, tile.width, tile.height, tile.bands, _CODE_OF[tile.data.dtype], len(tag))
    payload = np.ascontiguousarray(tile.data, dtype=_DTYPE_CODES[_CODE_OF[tile.data.dtype]]).tobytes()
    return head + tag + payload


def decode_tile(buf: bytes, tile_id: str = "") -> TileSample:
    if len(buf) < _HEAD.size:
        raise TileFormatError("truncated tile header")
    magic, version, w, h, bands, code, tag_len = _HEAD.unpack_from(buf)
    if magic != MAGIC:
        raise TileFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise TileFormatError(f"unsupported tile version {version}")
    if code not in _DTYPE_CODES:
        raise TileFormatError(f"unknown dtype code {code}")
    off = _HEAD.size
    tag = buf[off:off + tag_len].decode("ascii")
    off += tag_len
    dt = _DTYPE_CODES[code]
    need = w * h * bands * dt.itemsize
    if len(buf) - off != need:
        raise TileFormatError(f"payload is {len(buf) - off} bytes, header implies {need}")
    data = np.frombuffer(buf, dtype=dt, offset=off).reshape(bands, h, w).astype(dt.newbyteorder("="))
    return TileSample(tile_id, data, tuple(tag.split(",")) if tag else ())


def write_tile(path, tile: TileSample) -> None:
    Path(path).write_bytes(encode_tile(tile))


def read_tile(path) -> TileSample:
    p = Path(path)
    return decode_tile(p.read_bytes(), p.stem)


def import_png(path, tile_id: str | None = None) -> TileSample:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return TileSample(tile_id or Path(path).stem, np.ascontiguousarray(arr.transpose(2, 0, 1)), ("R", "G", "B"))


# -- dataset directories ---------------------------------------------------
INDEX = "index.jsonl"


def write_dataset(root, tiles, labels=None, masks=None, meta: dict | None = None) -> Path:
    """Write tiles (and optional class labels / segmentation masks) under ``root``."""
    root = Path(root)
    (root / "tiles").mkdir(parents=True, exist_ok=True)
    if masks is not None:
        (root / "masks").mkdir(exist_ok=True)
    with open(root / INDEX, "w") as fh:
        for i, tile in enumerate(tiles):
            rec = {"id": tile.id, "path": f"tiles/{tile.id}.mtil"}
            write_tile(root / rec["path"], tile)
            if labels is not None:
                rec["label"] = int(labels[i])
            if masks is not None:
                rec["mask"] = f"masks/{tile.id}.mtil"
                write_tile(root / rec["mask"], TileSample(tile.id, masks[i][None].astype(np.uint8), ("label",)))
            fh.write(json.dumps(rec) + "\n")
    if meta:
        (root / "meta.json").write_text(json.dumps(meta, indent=2))
    return root


def load_dataset(root):
    """Returns ``(images f32 [n, c, s, s], labels or None, masks or None, ids)``."""
    root = Path(root)
    idx = root / INDEX
    if not idx.exists():
        raise FileNotFoundError(f"{root} has no {INDEX}")
    recs = [json.loads(line) for line in idx.read_text().splitlines() if line.strip()]
    if not recs:
        raise ValueError(f"{root} is empty")
    images = np.stack([read_tile(root / r["path"]).as_float() for r in recs])
    labels = np.array([r["label"] for r in recs], dtype=np.int64) if "label" in recs[0] else None
    masks = (np.stack([read_tile(root / r["mask"]).data[0].astype(np.int64) for r in recs])
             if "mask" in recs[0] else None)
    return images, labels, masks, [r["id"] for r in recs]
