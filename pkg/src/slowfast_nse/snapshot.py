"""NSEF field snapshots and checkpoint sidecars.

Layout of an ``.nsef`` file (little endian)::

    b"NSEF"  u32 version  u32 N  u32 field_count
    field_count * N * N * 2 pairs of f64 (re, im)

Modes are written row-major in ``(k1, k2)`` with each index running from
``-N/2 + 1`` to ``N/2``; for every mode both velocity components follow each
other.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

__all__ = ["NSEF_VERSION", "atomic_write", "read_nsef", "write_nsef", "read_sidecar", "write_sidecar"]

NSEF_MAGIC = b"NSEF"
NSEF_VERSION = 1
_HEADER = struct.Struct("<4sIII")


def _order(n: int) -> np.ndarray:
    # FFT-layout index of each wavenumber -N/2+1 .. N/2
    return np.arange(-n // 2 + 1, n // 2 + 1) % n


def atomic_write(path, data: bytes) -> Path:
    """Write ``data`` to a temporary sibling, then rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return path


def encode_nsef(fields) -> bytes:
    arr = np.asarray(fields, dtype=complex)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != 2 or arr.shape[2] != arr.shape[3]:
        raise ValueError(f"expected fields of shape (F, 2, N, N), got {arr.shape}")
    n = arr.shape[-1]
    idx = _order(n)
    body = arr[:, :, idx][:, :, :, idx].transpose(0, 2, 3, 1)  # (F, k1, k2, component)
    body = np.ascontiguousarray(body).astype("<c16")
    return _HEADER.pack(NSEF_MAGIC, NSEF_VERSION, n, arr.shape[0]) + body.tobytes()


def decode_nsef(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size:
        raise ValueError("truncated NSEF header")
    magic, version, n, count = _HEADER.unpack_from(data)
    if magic != NSEF_MAGIC:
        raise ValueError("not an NSEF file")
    if version != NSEF_VERSION:
        raise ValueError(f"unsupported NSEF version {version}")
    expected = _HEADER.size + count * n * n * 2 * 16
    if len(data) != expected:
        raise ValueError(f"NSEF body has {len(data) - _HEADER.size} bytes, expected {expected - _HEADER.size}")
    body = np.frombuffer(data, dtype="<c16", offset=_HEADER.size).reshape(count, n, n, 2)
    out = np.zeros((count, 2, n, n), dtype=complex)
    idx = _order(n)
    out[:, :, idx[:, None], idx[None, :]] = body.transpose(0, 3, 1, 2)
    return out


def write_nsef(path, fields) -> Path:
    """Write an ``(F, 2, N, N)`` stack (or one field) atomically."""
    return atomic_write(path, encode_nsef(fields))


def read_nsef(path) -> np.ndarray:
    """Read a snapshot back as an ``(F, 2, N, N)`` complex array."""
    return decode_nsef(Path(path).read_bytes())


def dumps_json(obj) -> str:
    """Deterministic JSON: sorted keys, NaN and infinities written as null."""

    def clean(o):
        if isinstance(o, float) and not np.isfinite(o):
            return None
        if isinstance(o, (np.floating,)):
            return clean(float(o))
        if isinstance(o, (np.integer,)):
            return int(o)
        if isinstance(o, (np.bool_,)):
            return bool(o)
        if isinstance(o, dict):
            return {str(k): clean(v) for k, v in o.items()}
        if isinstance(o, (list, tuple, np.ndarray)):
            return [clean(v) for v in o]
        return o

    return json.dumps(clean(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_sidecar(path, meta: dict) -> Path:
    return atomic_write(path, dumps_json(meta).encode())


def read_sidecar(path) -> dict:
    return json.loads(Path(path).read_text())
