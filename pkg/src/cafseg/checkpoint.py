"""Binary checkpoint format.

Layout (little-endian)::

    b"CAFCKPT1"
    u32 tensor_count
    per tensor: u16 name_len, name (UTF-8), u8 rank, rank * u32 dims, float32 values
    u32 meta_len, meta (UTF-8 JSON)

Values are stored as float32, so a round trip is exact to ~1e-7 relative.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import ModelState

MAGIC = b"CAFCKPT1"


def encode_tensors(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        raw = name.encode("utf-8")
        value = np.asarray(value)
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", value.ndim))
        parts.append(struct.pack(f"<{value.ndim}I", *value.shape))
        parts.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated while reading {what} at byte offset {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_tensors(buf: bytes, path="<bytes>") -> tuple[dict[str, np.ndarray], dict]:
    r = _Reader(buf, path)
    magic = r.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte offset 0")
    (count,) = r.unpack("<I", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        start = r.pos
        try:
            name = r.take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{path}: invalid UTF-8 name at byte offset {start}") from None
        (rank,) = r.unpack("<B", "rank")
        dims = r.unpack(f"<{rank}I", "dims")
        n = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(r.take(4 * n, f"values of {name}"), dtype="<f4")
        tensors[name] = values.astype(np.float64).reshape(dims)
    (mlen,) = r.unpack("<I", "metadata length")
    start = r.pos
    try:
        meta = json.loads(r.take(mlen, "metadata").decode("utf-8")) if mlen else {}
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError(f"{path}: unreadable metadata at byte offset {start}") from None
    if r.pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - r.pos} trailing bytes at byte offset {r.pos}")
    return tensors, meta


def model_meta(model: ModelState) -> dict:
    return {"step": model.step, "classes": list(model.classes), "channels": model.channels, **model.meta}


def save_checkpoint(model: ModelState, path) -> None:
    """Write atomically (temp file then rename)."""
    path = Path(path)
    blob = encode_tensors(model.state_dict(), model_meta(model))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def load_checkpoint(path) -> ModelState:
    tensors, meta = decode_tensors(Path(path).read_bytes(), path)
    try:
        classes, channels = tuple(meta["classes"]), int(meta["channels"])
    except KeyError as exc:
        raise FormatError(f"{path}: metadata lacks {exc}") from None
    model = ModelState.init(classes, channels)
    model.load_state_dict(tensors)
    model.step = int(meta.get("step", 1))
    model.meta = {k: v for k, v in meta.items() if k not in ("step", "classes", "channels")}
    return model
