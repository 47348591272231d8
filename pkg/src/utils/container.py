"""Binary artifact container.

Layout (all integers little-endian)::

    b"DINF1"
    repeated records:
        u32 name length, UTF-8 name
        u8  dtype tag (0=f64, 1=f32, 2=i8, 3=u64)
        u32 rank, rank x u64 dims
        raw little-endian payload
    u64 checksum (blake2b-64 of every preceding byte)

String metadata travels as a JSON document in the ``meta`` record (dtype i8).
"""

import hashlib
import json
import logging
import struct
from pathlib import Path

import numpy as np

from src.utils.errors import ChecksumError, ContainerError

logger = logging.getLogger(__name__)

MAGIC = b"DINF1"
META_RECORD = "meta"

_TAGS = {
    0: np.dtype("<f8"),
    1: np.dtype("<f4"),
    2: np.dtype("i1"),
    3: np.dtype("<u8"),
}
_CODES = {dtype: code for code, dtype in _TAGS.items()}


def _checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def _coerce(array: np.ndarray) -> np.ndarray:
    array = np.asarray(array)
    if array.dtype.kind == "f":
        target = np.dtype("<f4") if array.dtype.itemsize == 4 else np.dtype("<f8")
    elif array.dtype == np.int8:
        target = np.dtype("i1")
    elif array.dtype.kind in "ui" or array.dtype.kind == "b":
        if array.dtype.kind == "i" and array.size and array.min() < 0:
            raise ContainerError("Negative integers can only be stored as i8")
        target = np.dtype("<u8")
    else:
        raise ContainerError(f"Unsupported dtype for container record: {array.dtype}")
    return np.ascontiguousarray(array, dtype=target)


class ArtifactContainer:
    def __init__(self, meta: dict | None = None):
        self.records: dict[str, np.ndarray] = {}
        self.meta: dict = dict(meta or {})

    def add(self, name: str, array) -> None:
        if name == META_RECORD or name in self.records:
            raise ContainerError(f"Duplicate record name: {name!r}")
        self.records[name] = _coerce(array)

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.records[name]
        except KeyError:
            raise ContainerError(f"Record {name!r} not found") from None

    def __contains__(self, name: str) -> bool:
        return name in self.records

    def to_bytes(self) -> bytes:
        body = bytearray(MAGIC)
        entries = list(self.records.items())
        meta_bytes = json.dumps(self.meta, sort_keys=True, separators=(",", ":"))
        meta = np.frombuffer(meta_bytes.encode("utf-8"), dtype=np.int8)
        entries.append((META_RECORD, meta))
        for name, array in entries:
            encoded = name.encode("utf-8")
            body += struct.pack("<I", len(encoded)) + encoded
            body += struct.pack("<B", _CODES[array.dtype])
            body += struct.pack("<I", array.ndim)
            body += struct.pack(f"<{array.ndim}Q", *array.shape)
            body += array.tobytes(order="C")
        body += struct.pack("<Q", _checksum(bytes(body)))
        return bytes(body)

    @classmethod
    def from_bytes(cls, payload: bytes) -> "ArtifactContainer":
        if len(payload) < len(MAGIC) + 8 or not payload.startswith(MAGIC):
            raise ContainerError("Not a DINF1 container")
        (stored,) = struct.unpack("<Q", payload[-8:])
        if stored != _checksum(payload[:-8]):
            raise ChecksumError("Container checksum mismatch")

        container = cls()
        seen: set[str] = set()
        offset = len(MAGIC)
        end = len(payload) - 8
        try:
            while offset < end:
                (name_len,) = struct.unpack_from("<I", payload, offset)
                offset += 4
                name = payload[offset : offset + name_len].decode("utf-8")
                offset += name_len
                (code,) = struct.unpack_from("<B", payload, offset)
                offset += 1
                (rank,) = struct.unpack_from("<I", payload, offset)
                offset += 4
                dims = struct.unpack_from(f"<{rank}Q", payload, offset)
                offset += 8 * rank
                dtype = _TAGS[code]
                count = int(np.prod(dims, dtype=np.int64)) if rank else 1
                nbytes = count * dtype.itemsize
                array = np.frombuffer(payload, dtype=dtype, count=count, offset=offset)
                offset += nbytes
                if name in seen:
                    raise ContainerError(f"Duplicate record name: {name!r}")
                seen.add(name)
                array = array.reshape(dims).copy()
                if name == META_RECORD:
                    container.meta = json.loads(array.tobytes().decode("utf-8"))
                else:
                    container.records[name] = array
        except (struct.error, KeyError, ValueError) as e:
            raise ContainerError(f"Malformed container: {e}") from e
        if offset != end:
            raise ContainerError("Trailing bytes after last record")
        return container

    def save(self, path: str | Path) -> str:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = self.to_bytes()
        path.write_bytes(payload)
        digest = payload[-8:].hex()
        logger.info("Wrote %s (%d records, checksum %s)", path, len(self.records), digest)
        return digest

    @classmethod
    def load(cls, path: str | Path) -> "ArtifactContainer":
        return cls.from_bytes(Path(path).read_bytes())


def file_checksum(path: str | Path) -> str:
    payload = Path(path).read_bytes()
    if len(payload) < 8:
        raise ContainerError(f"{path} is too short to be a container")
    return payload[-8:].hex()
