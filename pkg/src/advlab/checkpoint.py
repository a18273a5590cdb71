"""Binary tensor container shared by every persisted artifact.

Layout (little-endian)::

    b"PLAB"  u32 version=1  u32 entry_count
    per entry: u16 name_len, name (UTF-8), u8 ndim, ndim x u32 dims, float32 data

The architecture fingerprint travels as an ordinary entry whose name is
``"@fingerprint:" + fingerprint`` with a single zero-length dimension, so
readers that only know the tensor layout can still parse the file.
"""

from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"PLAB"
VERSION = 1
FINGERPRINT_PREFIX = "@fingerprint:"
HEADER_SIZE = 12


class CheckpointError(ValueError):
    pass


def write_container(path, tensors: Mapping[str, np.ndarray], fingerprint: str | None = None) -> None:
    entries = []
    if fingerprint is not None:
        entries.append((FINGERPRINT_PREFIX + fingerprint, np.zeros((0,), dtype="<f4")))
    entries.extend((name, np.asarray(arr)) for name, arr in tensors.items())
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(entries)))
        for name, arr in entries:
            raw = name.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise CheckpointError(f"tensor name too long: {name[:40]}...")
            if arr.ndim > 0xFF:
                raise CheckpointError(f"tensor {name!r} has too many dims")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_container(path) -> tuple[str | None, dict[str, np.ndarray]]:
    """Return ``(fingerprint, {name: float32 array})``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < HEADER_SIZE:
        raise CheckpointError(f"{path}: truncated header")
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = HEADER_SIZE
    fingerprint = None
    tensors: dict[str, np.ndarray] = {}

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(dims)) if ndim else 1
        data = np.frombuffer(take(4 * n), dtype="<f4").astype(np.float32).reshape(dims)
        if name.startswith(FINGERPRINT_PREFIX):
            fingerprint = name[len(FINGERPRINT_PREFIX) :]
        else:
            tensors[name] = data
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes")
    return fingerprint, tensors


def save_params(model, path) -> None:
    write_container(path, {k: v.data for k, v in model.params.items()}, model.fingerprint)


def load_params(model, path):
    """Load parameters into ``model`` in place after checking the fingerprint."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    fingerprint, tensors = read_container(path)
    if fingerprint != model.fingerprint:
        raise CheckpointError(f"{path}: fingerprint {fingerprint!r} does not match {model.fingerprint!r}")
    if set(tensors) != set(model.params):
        missing = sorted(set(model.params) - set(tensors))
        extra = sorted(set(tensors) - set(model.params))
        raise CheckpointError(f"{path}: parameter names differ (missing {missing}, extra {extra})")
    for name, p in model.params.items():
        if tensors[name].shape != p.shape:
            raise CheckpointError(f"{path}: {name} has shape {tensors[name].shape}, expected {p.shape}")
        p.data = tensors[name].astype(p.data.dtype)
    return model
