"""Binary formats shared across stages, and atomic file writes.

Raw segment (``.cks``)::

    b"CKS1" | u32 sample_rate | u64 n_samples | f32[n_samples]

Feature sequence (``.fsq``)::

    b"FSQ1" | u32 m | u32 n | f32[m * n] row-major

All integers and floats are little-endian.
"""
from __future__ import annotations

import contextlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

CKS_MAGIC = b"CKS1"
FSQ_MAGIC = b"FSQ1"


class FormatError(ValueError):
    """A file does not match the expected binary layout."""


@contextlib.contextmanager
def atomic_path(path: str | os.PathLike):
    """Yield a temporary sibling path that is renamed onto ``path`` on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def write_bytes_atomic(path, data: bytes) -> None:
    with atomic_path(path) as tmp:
        tmp.write_bytes(data)


def write_text_atomic(path, text: str) -> None:
    with atomic_path(path) as tmp:
        tmp.write_text(text)


def write_json_atomic(path, obj) -> None:
    write_text_atomic(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def encode_segment(samples: np.ndarray, sample_rate: int) -> bytes:
    samples = np.ascontiguousarray(samples, dtype="<f4")
    return CKS_MAGIC + struct.pack("<IQ", int(sample_rate), samples.size) + samples.tobytes()


def decode_segment(buf: bytes) -> tuple[np.ndarray, int]:
    if len(buf) < 16 or buf[:4] != CKS_MAGIC:
        raise FormatError("not a CKS1 raw segment")
    rate, n = struct.unpack_from("<IQ", buf, 4)
    if len(buf) != 16 + 4 * n:
        raise FormatError(f"CKS1 length mismatch: header says {n} samples, payload has {(len(buf) - 16) / 4}")
    return np.frombuffer(buf, dtype="<f4", count=n, offset=16).astype(np.float32), rate


def write_segment(path, samples: np.ndarray, sample_rate: int) -> None:
    write_bytes_atomic(path, encode_segment(samples, sample_rate))


def read_segment(path) -> tuple[np.ndarray, int]:
    return decode_segment(Path(path).read_bytes())


def encode_fsq(matrix: np.ndarray) -> bytes:
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise ValueError(f"feature sequence must be 2-D (m, n), got shape {matrix.shape}")
    m, n = matrix.shape
    return FSQ_MAGIC + struct.pack("<II", m, n) + matrix.tobytes()


def decode_fsq(buf: bytes) -> np.ndarray:
    if len(buf) < 12 or buf[:4] != FSQ_MAGIC:
        raise FormatError("not an FSQ1 feature sequence")
    m, n = struct.unpack_from("<II", buf, 4)
    if len(buf) != 12 + 4 * m * n:
        raise FormatError(f"FSQ1 length mismatch for ({m}, {n})")
    return np.frombuffer(buf, dtype="<f4", count=m * n, offset=12).reshape(m, n).astype(np.float32)


def write_fsq(path, matrix: np.ndarray, meta: dict) -> None:
    """Write the matrix plus a ``.json`` sidecar next to it."""
    path = Path(path)
    write_bytes_atomic(path, encode_fsq(matrix))
    write_json_atomic(path.with_suffix(path.suffix + ".json"), meta)


def read_fsq(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    matrix = decode_fsq(path.read_bytes())
    sidecar = path.with_suffix(path.suffix + ".json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return matrix, meta
