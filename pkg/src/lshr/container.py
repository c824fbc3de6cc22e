"""Versioned binary container for named arrays plus a JSON header.

Layout (all integers little-endian)::

    8 bytes   magic  b"LSHRBIN\\0"
    u16       format version
    u32       header length H
    H bytes   UTF-8 JSON header: {"kind", "meta", "arrays": [{name, dtype, shape, offset, nbytes}]}
    ...       array payloads, C order, little-endian
    u32       CRC-32 of everything above

Writing is deterministic (sorted keys, no timestamps), so identical inputs give
identical files, and reading returns arrays bit-for-bit.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .errors import CorruptFileError

MAGIC = b"LSHRBIN\0"
VERSION = 1


def encode(kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    index = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        index.append(
            {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"kind": kind, "meta": meta, "arrays": index}, sort_keys=True).encode()
    body = MAGIC + struct.pack("<HI", VERSION, len(header)) + header + b"".join(chunks)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes, expect_kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < len(MAGIC) + 10 or blob[: len(MAGIC)] != MAGIC:
        raise CorruptFileError("not an LSHR container (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptFileError("container checksum mismatch")
    version, hlen = struct.unpack_from("<HI", body, len(MAGIC))
    if version != VERSION:
        raise CorruptFileError(f"unsupported container version {version}")
    start = len(MAGIC) + 6
    header = json.loads(body[start : start + hlen].decode())
    if expect_kind is not None and header["kind"] != expect_kind:
        raise CorruptFileError(f"expected a {expect_kind!r} container, found {header['kind']!r}")
    payload = body[start + hlen :]
    arrays = {}
    for entry in header["arrays"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return header, arrays


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def write(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode(kind, meta, arrays))


def read(path, expect_kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes(), expect_kind)
