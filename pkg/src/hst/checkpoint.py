"""Binary checkpoint format with named tensors and a payload checksum.

Layout (little-endian):
    header:  magic "HSTC" | u32 version | 32-byte config hash | u64 step
    entries, sorted lexicographically by name, each:
        u32 name length | name utf-8 | u8 dtype tag (1=f32, 2=f64) |
        u8 rank | u64 extents[rank] | row-major data bytes
    trailer: u32 crc32 of every entry byte

Round-tripping reproduces each tensor bit for bit.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import DataFormatError

MAGIC = b"HSTC"
VERSION = 1
_HEADER = struct.Struct("<4sI32sQ")

_DTYPE_TAGS = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_TAG_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


def write_checkpoint(
    path: str | Path,
    arrays: dict[str, np.ndarray],
    config_hash: bytes,
    step: int,
) -> None:
    if len(config_hash) != 32:
        raise DataFormatError(f"config hash must be 32 bytes, got {len(config_hash)}")
    pieces = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype not in _DTYPE_TAGS:
            raise DataFormatError(f"checkpoint entry {name!r} has unsupported dtype {arr.dtype}")
        encoded = name.encode()
        pieces.append(struct.pack("<I", len(encoded)))
        pieces.append(encoded)
        pieces.append(struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim))
        pieces.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        pieces.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    payload = b"".join(pieces)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, config_hash, step))
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


def read_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], bytes, int]:
    """Returns (name -> array in written order, config hash, step)."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size + 4:
        raise DataFormatError("file shorter than checkpoint header + trailer", offset=len(blob))
    magic, version, config_hash, step = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise DataFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}", offset=4)
    payload = blob[_HEADER.size : -4]
    (stored_crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    actual_crc = zlib.crc32(payload)
    if actual_crc != stored_crc:
        raise DataFormatError(
            f"payload checksum mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}",
            offset=len(blob) - 4,
        )
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    total = len(payload)
    previous_name = None
    while offset < total:
        base = _HEADER.size + offset
        if offset + 4 > total:
            raise DataFormatError("truncated entry name length", offset=base)
        (name_len,) = struct.unpack_from("<I", payload, offset)
        offset += 4
        if offset + name_len + 2 > total:
            raise DataFormatError("truncated entry header", offset=base)
        name = payload[offset : offset + name_len].decode()
        offset += name_len
        tag, rank = struct.unpack_from("<BB", payload, offset)
        offset += 2
        if tag not in _TAG_DTYPES:
            raise DataFormatError(f"unknown dtype tag {tag} for entry {name!r}", offset=base)
        if offset + 8 * rank > total:
            raise DataFormatError(f"truncated extents for entry {name!r}", offset=base)
        shape = struct.unpack_from(f"<{rank}Q", payload, offset) if rank else ()
        offset += 8 * rank
        dtype = _TAG_DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
        if offset + nbytes > total:
            raise DataFormatError(f"truncated data for entry {name!r}", offset=_HEADER.size + offset)
        arr = np.frombuffer(payload, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset)
        arrays[name] = arr.reshape(shape).copy()
        offset += nbytes
        if previous_name is not None and name <= previous_name:
            raise DataFormatError(
                f"entries out of lexicographic order: {previous_name!r} then {name!r}",
                offset=base,
            )
        previous_name = name
    return arrays, config_hash, step
