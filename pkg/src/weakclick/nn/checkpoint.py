"""Model checkpoints: JSON architecture descriptor + ``MDL1`` parameter blob.

Blob layout (little-endian)::

    b"MDL1" | u32 n_tensors
    per tensor: u32 name_len | name utf-8 | u32 ndim | u32 dims[ndim] | f32 data
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..fileio import FormatError, write_bytes_atomic, write_json_atomic

MAGIC = b"MDL1"


def encode_params(state: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(state))]
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_params(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise FormatError("not an MDL1 parameter blob")
    (count,) = struct.unpack_from("<I", buf, 4)
    pos = 8
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * size > len(buf):
                raise FormatError(f"MDL1 truncated in tensor {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * size
    except struct.error as exc:
        raise FormatError(f"MDL1 truncated: {exc}") from exc
    if pos != len(buf):
        raise FormatError(f"MDL1 has {len(buf) - pos} trailing bytes")
    return out


def save_checkpoint(path, architecture: dict, state: dict[str, np.ndarray]) -> None:
    """Write ``<path>.json`` (architecture) and ``<path>.mdl`` (parameters)."""
    path = Path(path)
    write_bytes_atomic(path.with_suffix(".mdl"), encode_params(state))
    write_json_atomic(path.with_suffix(".json"), architecture)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    architecture = json.loads(path.with_suffix(".json").read_text())
    state = decode_params(path.with_suffix(".mdl").read_bytes())
    return architecture, state
