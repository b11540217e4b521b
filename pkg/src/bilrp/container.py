"""Reader and writer for the ``TNSR1`` dense tensor container.

Layout::

    b"TNSR1" | uint32 LE header length | JSON header | data region

The header is a JSON array of ``{name, dtype, shape, offset, byte_length}``
records; offsets are relative to the start of the data region, which holds
row-major little-endian float32 values.
"""

from __future__ import annotations

import json
import os
import struct
from typing import Mapping

import numpy as np

from .errors import ContainerFormatError, UnsupportedDtype

MAGIC = b"TNSR1"
_LEN = struct.Struct("<I")
_F32 = np.dtype("<f4")


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    """Serialize tensors in mapping order, packed without padding."""
    header = []
    chunks = []
    offset = 0
    for name, array in tensors.items():
        data = np.ascontiguousarray(array, dtype=_F32).tobytes()
        header.append(
            {
                "name": name,
                "dtype": "f32",
                "shape": list(np.shape(array)),
                "offset": offset,
                "byte_length": len(data),
            }
        )
        chunks.append(data)
        offset += len(data)
    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    return b"".join([MAGIC, _LEN.pack(len(header_bytes)), header_bytes, *chunks])


def decode(blob: bytes) -> dict[str, np.ndarray]:
    """Parse a container; arrays are read-only float32 views into a copy of *blob*."""
    if blob[: len(MAGIC)] != MAGIC:
        raise ContainerFormatError("bad magic, not a TNSR1 container")
    start = len(MAGIC) + _LEN.size
    if len(blob) < start:
        raise ContainerFormatError("truncated header length")
    (header_len,) = _LEN.unpack_from(blob, len(MAGIC))
    data_start = start + header_len
    if len(blob) < data_start:
        raise ContainerFormatError("truncated header")
    try:
        header = json.loads(blob[start:data_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerFormatError(f"header is not valid JSON: {exc}") from None
    if not isinstance(header, list):
        raise ContainerFormatError("header must be a JSON array")

    data = blob[data_start:]
    tensors: dict[str, np.ndarray] = {}
    for entry in header:
        try:
            name = entry["name"]
            dtype = entry["dtype"]
            shape = tuple(int(n) for n in entry["shape"])
            offset = int(entry["offset"])
            byte_length = int(entry["byte_length"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ContainerFormatError(f"bad header entry {entry!r}: {exc}") from None
        if dtype != "f32":
            raise UnsupportedDtype(f"tensor {name!r} has dtype {dtype!r}; only 'f32' is supported")
        if name in tensors:
            raise ContainerFormatError(f"duplicate tensor {name!r}")
        count = int(np.prod(shape, dtype=np.int64))
        if byte_length != count * _F32.itemsize:
            raise ContainerFormatError(
                f"tensor {name!r}: byte_length {byte_length} does not match shape {shape}"
            )
        if offset < 0 or offset + byte_length > len(data):
            raise ContainerFormatError(f"tensor {name!r} extends past end of data region")
        array = np.frombuffer(data, dtype=_F32, count=count, offset=offset).reshape(shape)
        tensors[name] = array
    return tensors


def read_container(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode(fh.read())


def write_container(tensors: Mapping[str, np.ndarray], path: str | os.PathLike) -> None:
    blob = encode(tensors)
    with open(path, "wb") as fh:
        fh.write(blob)
