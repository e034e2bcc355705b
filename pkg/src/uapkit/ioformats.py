"""A small self-describing binary container for named tensors plus JSON metadata.

Used for classifier and generator checkpoints instead of pickle so corrupt or
truncated files are rejected deterministically with a specific error. Layout
(all integers little-endian):

    magic "NTC1" | version u32 | total_length u64 | meta_len u32 | meta JSON
    | count u32 | count x (name_len u32, name, dtype_len u32, dtype,
      ndim u32, ndim x dim u32, payload_len u64, payload)
    | sha256 of everything before it

total_length counts the whole file including the digest, so truncation is
detected as a length mismatch before the digest is even checked.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import DigestMismatchError, FileFormatError, TruncatedFileError, VersionMismatchError

MAGIC = b"NTC1"
VERSION = 1
_DIGEST_BYTES = 32
_ALLOWED_DTYPES = {"float32", "float64", "int64", "int32", "uint8"}


class _Reader:
    def __init__(self, data: bytes, path: Path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"{self.path}: needed {n} bytes at offset {self.pos}, file ends early"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def save_named_tensors(path: str | Path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Write ``tensors`` and ``meta`` to ``path`` in the container format."""
    meta_blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    body = bytearray()
    body += struct.pack("<I", len(meta_blob)) + meta_blob
    body += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr)  # not ascontiguousarray: that would turn 0-d into 1-d
        dtype = arr.dtype.name
        if dtype not in _ALLOWED_DTYPES:
            raise ValueError(f"unsupported tensor dtype {dtype} for {name!r}")
        name_b = name.encode("utf-8")
        dtype_b = dtype.encode("ascii")
        payload = arr.astype(arr.dtype.newbyteorder("<")).tobytes(order="C")
        body += struct.pack("<I", len(name_b)) + name_b
        body += struct.pack("<I", len(dtype_b)) + dtype_b
        body += struct.pack("<I", arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
        body += struct.pack("<Q", len(payload)) + payload

    total = len(MAGIC) + 4 + 8 + len(body) + _DIGEST_BYTES
    head = MAGIC + struct.pack("<I", VERSION) + struct.pack("<Q", total)
    blob = head + bytes(body)
    blob += hashlib.sha256(blob).digest()
    Path(path).write_bytes(blob)


def load_named_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container written by save_named_tensors.

    Raises FileFormatError for a bad magic, VersionMismatchError for an
    unsupported version, TruncatedFileError when the byte count disagrees
    with the header, and DigestMismatchError for in-place corruption.
    """
    path = Path(path)
    data = path.read_bytes()
    if len(data) < len(MAGIC) + 4 + 8 + _DIGEST_BYTES:
        raise TruncatedFileError(f"{path}: {len(data)} bytes is too short for a container")
    if data[: len(MAGIC)] != MAGIC:
        raise FileFormatError(f"{path}: bad magic {data[:len(MAGIC)]!r}")
    version = struct.unpack_from("<I", data, len(MAGIC))[0]
    if version != VERSION:
        raise VersionMismatchError(f"{path}: container version {version}, expected {VERSION}")
    total = struct.unpack_from("<Q", data, len(MAGIC) + 4)[0]
    if len(data) != total:
        raise TruncatedFileError(f"{path}: header declares {total} bytes, file has {len(data)}")
    digest = hashlib.sha256(data[:-_DIGEST_BYTES]).digest()
    if digest != data[-_DIGEST_BYTES:]:
        raise DigestMismatchError(f"{path}: checksum mismatch, file is corrupt")

    rd = _Reader(data[: -_DIGEST_BYTES], path)
    rd.take(len(MAGIC) + 4 + 8)
    try:
        meta = json.loads(rd.take(rd.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FileFormatError(f"{path}: malformed metadata block: {exc}") from exc
    tensors: dict[str, np.ndarray] = {}
    for _ in range(rd.u32()):
        name = rd.take(rd.u32()).decode("utf-8")
        dtype = rd.take(rd.u32()).decode("ascii")
        if dtype not in _ALLOWED_DTYPES:
            raise FileFormatError(f"{path}: unsupported dtype {dtype!r} for {name!r}")
        shape = tuple(rd.u32() for _ in range(rd.u32()))
        payload = rd.take(rd.u64())
        arr = np.frombuffer(payload, dtype=np.dtype(dtype).newbyteorder("<")).astype(dtype)
        expected = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if arr.size != expected:
            raise FileFormatError(
                f"{path}: payload for {name!r} has {arr.size} elements, shape says {expected}"
            )
        tensors[name] = arr.reshape(shape)
    if rd.pos != len(rd.data):
        raise FileFormatError(f"{path}: {len(rd.data) - rd.pos} unexpected trailing bytes")
    return tensors, meta
