"""Versioned binary checkpoints.

Layout (little endian)::

    b"VLADCKPT"  u32 version
    u32 meta_len, meta JSON (config hash, Adam step, free-form fields)
    u32 n_entries, then per entry:
        u16 name_len, name (utf-8), u8 ndim, u32 dims[ndim], float32 data (row-major)
    16-byte blake2b digest of everything above

Parameter names are namespaced (``encoder.*``, ``decoder.*``,
``anchorformer.*``); Adam moments are stored as ``adam.m/<name>`` and
``adam.v/<name>``. Entries are written in sorted name order so equal
contents give equal bytes.
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

from .autodiff import AdamState, Tensor

MAGIC = b"VLADCKPT"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    optimizer: AdamState | None
    config_hash: str
    meta: dict = field(default_factory=dict)

    def tensors(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {k: Tensor(v.copy(), requires_grad, k) for k, v in self.params.items()}


def _arrays(params) -> dict[str, np.ndarray]:
    return {k: np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float32) for k, v in params.items()}


def encode_checkpoint(params, optimizer: AdamState | None, config_hash: str, meta: dict | None = None) -> bytes:
    table = _arrays(params)
    for k in table:
        if k.startswith("adam."):
            raise CheckpointError(f"parameter name {k!r} collides with optimizer namespace")
    head = {"config_hash": config_hash, "meta": meta or {}, "adam_step": None}
    if optimizer is not None:
        head["adam_step"] = optimizer.step
        table.update({f"adam.m/{k}": v.astype(np.float32) for k, v in optimizer.m.items()})
        table.update({f"adam.v/{k}": v.astype(np.float32) for k, v in optimizer.v.items()})
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    blob = json.dumps(head, sort_keys=True).encode()
    out += struct.pack("<I", len(blob)) + blob
    out += struct.pack("<I", len(table))
    for name in sorted(table):
        a = np.ascontiguousarray(table[name], dtype="<f4")
        nb = name.encode()
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
        out += a.tobytes()
    out += hashlib.blake2b(bytes(out), digest_size=16).digest()
    return bytes(out)


def save_checkpoint(path, params, optimizer: AdamState | None, config_hash: str, meta: dict | None = None) -> Path:
    path = Path(path)
    data = encode_checkpoint(params, optimizer, config_hash, meta)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "wb") as f:
        f.write(data)
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        b = self.buf[self.pos : self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes, config_hash: str | None = None, force: bool = False) -> Checkpoint:
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic bytes)")
    if len(data) < len(MAGIC) + 16 or hashlib.blake2b(data[:-16], digest_size=16).digest() != data[-16:]:
        raise CheckpointError("checkpoint digest mismatch (corrupt file)")
    r = _Reader(data[:-16])
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = r.unpack("<I")
    head = json.loads(r.take(n))
    (count,) = r.unpack("<I")
    table: dict[str, np.ndarray] = {}
    for _ in range(count):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        table[name] = np.frombuffer(r.take(4 * size), dtype="<f4").astype(np.float32).reshape(shape)
    if r.pos != len(r.buf):
        raise CheckpointError("trailing bytes in checkpoint")
    if config_hash is not None and head["config_hash"] != config_hash and not force:
        raise CheckpointError(f"config hash {head['config_hash']} does not match {config_hash}")
    params = {k: v for k, v in table.items() if not k.startswith("adam.")}
    opt = None
    if head["adam_step"] is not None:
        opt = AdamState(
            step=head["adam_step"],
            m={k[len("adam.m/") :]: v for k, v in table.items() if k.startswith("adam.m/")},
            v={k[len("adam.v/") :]: v for k, v in table.items() if k.startswith("adam.v/")},
        )
    return Checkpoint(params, opt, head["config_hash"], head["meta"])


def load_checkpoint(path, config_hash: str | None = None, force: bool = False) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), config_hash, force)
