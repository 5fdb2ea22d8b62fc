"""Self-describing little-endian checkpoint files.

Layout::

    b"MSVPCKPT"  u32 version
    u32 meta_len, meta (UTF-8 JSON)
    u32 n_records
    per record: u16 name_len, name, u8 dtype, u8 ndim, u32 dims[ndim], payload

The registry is the model's ``state_dict`` (parameters plus batch-norm
buffers), so eval-mode logits survive a round trip bit-exactly.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import (CheckpointError, CheckpointMagicError, CheckpointShapeError, CheckpointTruncatedError,
                     RegistryMismatchError)

MAGIC = b"MSVPCKPT"
VERSION = 1
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
DTYPE_CODES = {torch.float32: 1, torch.float64: 2, torch.int64: 3}


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def encode(state: dict, meta: dict | None = None) -> bytes:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(state))]
    for name, t in state.items():
        if t.dtype not in DTYPE_CODES:
            raise CheckpointError(f"{name}: unsupported dtype {t.dtype}")
        code = DTYPE_CODES[t.dtype]
        nb = name.encode()
        arr = np.array(t.detach().cpu().numpy(), dtype=DTYPES[code], order="C")
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<BB", code, arr.ndim),
                  struct.pack("<" + "I" * arr.ndim, *arr.shape), arr.tobytes()]
    return b"".join(parts)


def decode(buf: bytes):
    """Returns ``(meta, {name: np.ndarray})``."""
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointTruncatedError(f"checkpoint truncated reading {what}: need {pos + n} bytes, have {len(buf)}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if buf[:len(MAGIC)] != MAGIC:
        raise CheckpointMagicError(f"not a checkpoint: magic {buf[:len(MAGIC)]!r} != {MAGIC!r}")
    pos = len(MAGIC)
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (mlen,) = struct.unpack("<I", take(4, "metadata length"))
    meta = json.loads(take(mlen, "metadata").decode())
    (count,) = struct.unpack("<I", take(4, "record count"))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode()
        code, ndim = struct.unpack("<BB", take(2, f"{name} header"))
        if code not in DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        dims = struct.unpack("<" + "I" * ndim, take(4 * ndim, f"{name} dims"))
        dt = DTYPES[code]
        n = int(np.prod(dims)) if ndim else 1
        arrays[name] = np.frombuffer(take(n * dt.itemsize, f"{name} payload"), dtype=dt).reshape(dims).copy()
    return meta, arrays


def save_checkpoint(model_or_state, meta: dict | None, path) -> Path:
    state = model_or_state if isinstance(model_or_state, dict) else model_or_state.state_dict()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(state, meta))
    return path


def read_checkpoint(path):
    return decode(Path(path).read_bytes())


def load_into(model, arrays: dict) -> None:
    """Copy arrays into ``model`` after validating every name and shape."""
    target = model.state_dict()
    for a, b in zip(target, arrays):
        if a != b:
            raise RegistryMismatchError(f"registry mismatch: first offending name {b!r} (model expects {a!r})")
    if len(target) != len(arrays):
        extra = list(arrays)[len(target):] or list(target)[len(arrays):]
        raise RegistryMismatchError(f"registry mismatch: first offending name {extra[0]!r} (record count "
                                    f"{len(arrays)} vs model {len(target)})")
    for name, t in target.items():
        if tuple(t.shape) != arrays[name].shape:
            raise CheckpointShapeError(f"{name}: checkpoint shape {arrays[name].shape} != model shape {tuple(t.shape)}")
    model.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})


def load_checkpoint(path, model=None):
    meta, arrays = read_checkpoint(path)
    if model is not None:
        load_into(model, arrays)
    return meta, arrays
