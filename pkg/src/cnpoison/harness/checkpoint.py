"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"CPLB"                       magic
    u32   version
    str   kind                    backbone | control | detector
    u32   T; f64 beta_start; f64 beta_end
    64B   config digest (hex sha256)
    u32   n_meta, then n_meta x (str key, str value)
    u32   n_tensors, then per tensor:
          str name; u32 rank; rank x u32 extents; float32 values

where ``str`` is a u16 byte length followed by UTF-8 bytes.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"CPLB"
VERSION = 1
KINDS = ("backbone", "control", "detector")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str
    tensors: dict[str, np.ndarray]
    schedule: tuple[int, float, float]
    digest: str
    meta: dict[str, str] = field(default_factory=dict)


def _wstr(buf: io.BytesIO, s: str) -> None:
    b = s.encode()
    buf.write(struct.pack("<H", len(b)))
    buf.write(b)


def _rstr(buf: io.BytesIO) -> str:
    (n,) = struct.unpack("<H", _read(buf, 2))
    return _read(buf, n).decode()


def _read(buf: io.BytesIO, n: int) -> bytes:
    b = buf.read(n)
    if len(b) != n:
        raise CheckpointError("checkpoint truncated")
    return b


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    if ckpt.kind not in KINDS:
        raise ValueError(f"unknown checkpoint kind {ckpt.kind!r}")
    if len(ckpt.digest) != 64:
        raise ValueError("config digest must be a 64-character hex sha256")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    _wstr(buf, ckpt.kind)
    T, b0, b1 = ckpt.schedule
    buf.write(struct.pack("<Idd", T, b0, b1))
    buf.write(ckpt.digest.encode("ascii"))
    buf.write(struct.pack("<I", len(ckpt.meta)))
    for k, v in sorted(ckpt.meta.items()):
        _wstr(buf, k)
        _wstr(buf, str(v))
    buf.write(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in sorted(ckpt.tensors.items()):
        arr = np.asarray(arr)
        _wstr(buf, name)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)
    return path


def load_checkpoint(path, kind: str | None = None, digest: str | None = None) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    buf = io.BytesIO(path.read_bytes())
    if _read(buf, 4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", _read(buf, 4))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    got_kind = _rstr(buf)
    if kind is not None and got_kind != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {got_kind}")
    T, b0, b1 = struct.unpack("<Idd", _read(buf, 20))
    got_digest = _read(buf, 64).decode("ascii")
    if digest is not None and got_digest != digest:
        raise CheckpointError(f"{path}: config digest mismatch ({got_digest[:12]} != {digest[:12]})")
    (n_meta,) = struct.unpack("<I", _read(buf, 4))
    meta = {}
    for _ in range(n_meta):
        k = _rstr(buf)
        meta[k] = _rstr(buf)
    (n,) = struct.unpack("<I", _read(buf, 4))
    tensors = {}
    for _ in range(n):
        name = _rstr(buf)
        (rank,) = struct.unpack("<I", _read(buf, 4))
        shape = struct.unpack(f"<{rank}I", _read(buf, 4 * rank))
        count = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(_read(buf, 4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    if buf.read(1):
        raise CheckpointError(f"{path}: trailing bytes after last tensor")
    return Checkpoint(got_kind, tensors, (T, b0, b1), got_digest, meta)
