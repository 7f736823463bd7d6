"""Little-endian, length-prefixed named tensor blocks.

Layout::

    magic   4s   b"ASNB"
    version u16
    kind    u16 length + utf-8     ("checkpoint", "dataset", ...)
    count   u32
    count x block:
        name    u16 length + utf-8
        dtype   u8    1=float64 2=int64 3=uint8
        ndim    u8
        dims    ndim x u64
        nbytes  u64
        data    nbytes, little-endian, row-major
"""
from __future__ import annotations

import struct

import numpy as np

MAGIC = b"ASNB"
VERSION = 1
_DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_CODES = {np.dtype("float64"): 1, np.dtype("int64"): 2, np.dtype("uint8"): 3}


class FormatError(ValueError):
    pass


def _str(b: str) -> bytes:
    raw = b.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def write_blocks(path, kind: str, blocks: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<H", VERSION), _str(kind), struct.pack("<I", len(blocks))]
    for name, arr in blocks.items():
        arr = np.asarray(arr)
        if arr.dtype.kind == "f":
            arr = arr.astype(np.float64)
        elif arr.dtype.kind in "iu" and arr.dtype != np.uint8:
            arr = arr.astype(np.int64)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise FormatError(f"unsupported dtype {arr.dtype} for block {name!r}")
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        parts += [
            _str(name),
            struct.pack("<BB", code, arr.ndim),
            struct.pack(f"<{arr.ndim}Q", *arr.shape),
            struct.pack("<Q", len(data)),
            data,
        ]
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def read_blocks(path, kind: str | None = None) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        buf = f.read()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"{path}: truncated at offset {pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    def take_str():
        (n,) = struct.unpack("<H", take(2))
        return take(n).decode("utf-8")

    if take(4) != MAGIC:
        raise FormatError(f"{path}: bad magic at offset 0")
    (version,) = struct.unpack("<H", take(2))
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    got_kind = take_str()
    if kind is not None and got_kind != kind:
        raise FormatError(f"{path}: expected a {kind!r} file, found {got_kind!r}")
    (count,) = struct.unpack("<I", take(4))
    out = {}
    for _ in range(count):
        name = take_str()
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise FormatError(f"{path}: unknown dtype code {code} at offset {pos - 2}")
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        (nbytes,) = struct.unpack("<Q", take(8))
        arr = np.frombuffer(take(nbytes), dtype=_DTYPES[code])
        out[name] = arr.reshape(shape).astype(_DTYPES[code].newbyteorder("="))
    return out
