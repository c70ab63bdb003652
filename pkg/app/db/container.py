"""
container.py — binary tensor container and key-value manifests.

Tensor file layout (all little-endian):

    magic    4 bytes   b"ADPT"
    version  u32       1
    count    u32       number of records
    record:
        name_len u16, name utf-8 bytes
        ndim     u32, dims u64 * ndim
        payload  float64 * prod(dims)

Manifests are sorted `key=value` lines, read back with python-dotenv.
Writes go to a temp file first and are moved into place with os.replace.
"""
from __future__ import annotations

import hashlib
import logging
import os
import struct
from pathlib import Path

import numpy as np
from dotenv import dotenv_values

logger = logging.getLogger(__name__)

MAGIC = b"ADPT"
VERSION = 1


class ContainerError(ValueError):
    """Raised when a tensor file is truncated, has a bad magic or an unknown version."""


def atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_suffix(path.suffix + ".tmp")
    with open(tmp_path, "wb") as fh:
        fh.write(data)
    os.replace(tmp_path, path)


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value, dtype="<f8")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_tensors(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise ContainerError(f"bad magic {data[:4]!r}")
    view = memoryview(data)
    try:
        version, count = struct.unpack_from("<II", view, 4)
        if version != VERSION:
            raise ContainerError(f"unsupported container version {version}")
        offset = 12
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", view, offset)
            offset += 2
            name = bytes(view[offset:offset + name_len]).decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<I", view, offset)
            offset += 4
            dims = struct.unpack_from(f"<{ndim}Q", view, offset)
            offset += 8 * ndim
            size = int(np.prod(dims)) if ndim else 1
            if offset + 8 * size > len(data):
                raise ContainerError(f"record {name!r} truncated")
            if size == 0:
                out[name] = np.zeros(dims)
            else:
                arr = np.frombuffer(data, dtype="<f8", count=size, offset=offset)
                out[name] = arr.reshape(dims).astype(np.float64)
            offset += 8 * size
    except struct.error as exc:
        raise ContainerError(f"truncated container: {exc}") from exc
    return out


def write_tensors(path: str | os.PathLike, tensors: dict[str, np.ndarray]) -> str:
    """Write the container and return its sha256."""
    data = encode_tensors(tensors)
    atomic_write(Path(path), data)
    logger.debug("Wrote %d tensors to %s (%d bytes)", len(tensors), path, len(data))
    return hashlib.sha256(data).hexdigest()


def read_tensors(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())


def file_checksum(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path: str | os.PathLike, values: dict[str, object]) -> None:
    lines = []
    for key in sorted(values):
        value = str(values[key])
        if "\n" in value:
            raise ValueError(f"manifest value for {key!r} spans lines")
        lines.append(f"{key}={value}")
    atomic_write(Path(path), ("\n".join(lines) + "\n").encode("utf-8"))


def read_manifest(path: str | os.PathLike) -> dict[str, str]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"manifest not found: {p}")
    return {k: v for k, v in dotenv_values(p).items() if v is not None}
