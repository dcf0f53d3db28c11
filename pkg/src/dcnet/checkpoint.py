"""Binary checkpoint container.

Layout (little-endian)::

    b"DCN1"  u32 version
    u32 len  model-spec text (UTF-8, key=value lines)
    u32 len  metadata JSON (epoch, RNG states, config)
    u32 count
    count x { u16 len, name (UTF-8); u8 ndim; ndim x u32 dims; float32 payload }

Parameters are stored under ``param/<name>`` and momentum buffers under
``momentum/<name>``.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"DCN1"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    spec_text: str
    params: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def _pack_text(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def to_bytes(ckpt: Checkpoint) -> bytes:
    records = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    records += [(f"momentum/{k}", v) for k, v in ckpt.momentum.items()]
    out = [MAGIC, struct.pack("<I", VERSION), _pack_text(ckpt.spec_text), _pack_text(json.dumps(ckpt.meta, sort_keys=True))]
    out.append(struct.pack("<I", len(records)))
    for name, arr in records:
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise CheckpointError(f"{name}: only float32 arrays are stored, got {arr.dtype}")
        raw_name = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw_name)) + raw_name)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr).astype("<f4", copy=False).tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, raw: bytes, source: str):
        self.raw, self.pos, self.source = raw, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.source}: truncated at byte {self.pos} (need {n} more)")
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def text(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def from_bytes(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    r = _Reader(raw, source)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{source}: bad magic, not a checkpoint file")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported version {version} (expected {VERSION})")
    spec_text = r.text()
    meta = json.loads(r.text())
    (count,) = r.unpack("<I")
    params: dict[str, np.ndarray] = {}
    momentum: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
        kind, _, key = name.partition("/")
        if kind == "param":
            params[key] = arr
        elif kind == "momentum":
            momentum[key] = arr
        else:
            raise CheckpointError(f"{source}: unknown record kind in {name!r}")
    if r.pos != len(raw):
        raise CheckpointError(f"{source}: {len(raw) - r.pos} trailing bytes")
    return Checkpoint(spec_text, params, momentum, meta)


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    """Write atomically (temp file + rename) so a crash never leaves a torn file."""
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(to_bytes(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read(), path)


def spec_mismatch(expected: str, found: str) -> list[str]:
    """Keys whose values differ between two model-spec text blocks."""

    def parse(text):
        return dict(line.split("=", 1) for line in text.strip().splitlines() if "=" in line)

    a, b = parse(expected), parse(found)
    return [f"{k}: expected {a.get(k)!r}, found {b.get(k)!r}" for k in sorted(set(a) | set(b)) if a.get(k) != b.get(k)]


def apply_params(model, params: dict[str, np.ndarray]) -> None:
    """Copy arrays into ``model``'s parameters; names and shapes must match exactly."""
    own = model.named_parameters()
    missing = sorted(set(own) - set(params))
    extra = sorted(set(params) - set(own))
    if missing or extra:
        raise CheckpointError(f"parameter names differ: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, t in own.items():
        if params[name].shape != t.shape:
            raise CheckpointError(f"{name}: shape {params[name].shape} does not match model {t.shape}")
        t.data = params[name].astype(t.data.dtype, copy=True)
