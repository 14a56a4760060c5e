"""Single-file named-tensor checkpoints (``.orkt``).

Layout::

    magic        4s   b"ORKT"
    version      u16  1
    header_len   u64  bytes of the JSON header that follows
    header       utf-8 JSON {"tensors": {name: {dtype, shape, offset, length}},
                             "metadata": {...}}
    payload      little-endian tensor bytes; offsets are relative to its start

Writes go to a temporary file in the target directory and are renamed into
place. Readers validate the whole header before touching the payload.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"ORKT"
VERSION = 1
_PREFIX = struct.Struct("<4sHQ")
DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "i64": np.dtype("<i8"),
          "i32": np.dtype("<i4"), "u8": np.dtype("u1")}
_CODE = {v.newbyteorder("="): k for k, v in DTYPES.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @property
    def bands(self) -> int:
        return int(self.metadata["bands"])


def _dtype_code(arr: np.ndarray) -> str:
    dt = arr.dtype.newbyteorder("=")
    if dt not in _CODE:
        raise CheckpointError(f"unsupported tensor dtype {arr.dtype}")
    return _CODE[dt]


def encode(ckpt: Checkpoint) -> bytes:
    entries, chunks, offset = {}, [], 0
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name])
        code = _dtype_code(arr)
        raw = np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()
        entries[name] = {"dtype": code, "shape": list(arr.shape), "offset": offset, "length": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries, "metadata": ckpt.metadata}, sort_keys=True).encode()
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)


def validate_header(header: dict, payload_len: int) -> None:
    if set(header) != {"tensors", "metadata"}:
        raise CheckpointError(f"header keys {sorted(header)} != ['metadata', 'tensors']")
    spans = []
    for name, e in header["tensors"].items():
        if set(e) != {"dtype", "shape", "offset", "length"}:
            raise CheckpointError(f"{name}: malformed header entry {e}")
        if e["dtype"] not in DTYPES:
            raise CheckpointError(f"{name}: unknown dtype {e['dtype']!r}")
        if any((not isinstance(s, int)) or s < 0 for s in e["shape"]):
            raise CheckpointError(f"{name}: bad shape {e['shape']}")
        need = int(np.prod(e["shape"], dtype=np.int64)) * DTYPES[e["dtype"]].itemsize
        if e["length"] != need:
            raise CheckpointError(f"{name}: length {e['length']} != shape x itemsize {need}")
        if e["offset"] < 0 or e["offset"] + e["length"] > payload_len:
            raise CheckpointError(f"{name}: span [{e['offset']}, {e['offset'] + e['length']}) outside payload")
        spans.append((e["offset"], e["offset"] + e["length"], name))
    spans.sort()
    for (s0, e0, n0), (s1, _, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise CheckpointError(f"tensors {n0} and {n1} overlap")


def read_header(buf: bytes) -> tuple[dict, int]:
    if len(buf) < _PREFIX.size:
        raise CheckpointError("file too short for checkpoint prefix")
    magic, version, hlen = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}; not a checkpoint")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size + hlen
    if start > len(buf):
        raise CheckpointError("truncated header")
    try:
        header = json.loads(buf[_PREFIX.size:start])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"header is not valid JSON: {e}") from e
    validate_header(header, len(buf) - start)
    return header, start


def decode(buf: bytes) -> Checkpoint:
    header, start = read_header(buf)
    tensors = {}
    for name, e in header["tensors"].items():
        dt = DTYPES[e["dtype"]]
        a = np.frombuffer(buf, dtype=dt, count=e["length"] // dt.itemsize, offset=start + e["offset"])
        tensors[name] = a.reshape(e["shape"]).astype(dt.newbyteorder("="))
    return Checkpoint(tensors, header["metadata"])


def save(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode(ckpt)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def payload_digest(path) -> str:
    """sha256 over the tensor payload only (metadata excluded)."""
    buf = Path(path).read_bytes()
    _, start = read_header(buf)
    return hashlib.sha256(buf[start:]).hexdigest()
