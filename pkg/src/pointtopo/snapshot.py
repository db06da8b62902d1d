"""Binary snapshot container used for particle clouds, topology checkpoints and
simulation states.

Layout (all integers little-endian)::

    magic      8 bytes   b"PTOPOSNP"
    version    uint32    currently 1
    kind       uint16 length + utf-8 bytes      e.g. "particle_cloud"
    meta       uint32 length + utf-8 JSON       sorted keys, scalars only
    n_arrays   uint32
    repeated n_arrays times:
        name   uint16 length + utf-8 bytes
        dtype  1 byte: b"d" float64, b"q" int64, b"B" uint8 (booleans)
        ndim   uint8
        shape  ndim x uint64
        data   C-order little-endian payload

Arrays are written in insertion order so identical inputs give identical bytes.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"PTOPOSNP"
VERSION = 1

_CODES = {b"d": np.dtype("<f8"), b"q": np.dtype("<i8"), b"B": np.dtype("u1")}


class SnapshotError(ValueError):
    pass


@dataclass
class Snapshot:
    kind: str
    meta: dict = field(default_factory=dict)
    arrays: dict[str, np.ndarray] = field(default_factory=dict)


def _code_for(arr: np.ndarray) -> tuple[bytes, np.ndarray]:
    if arr.dtype == np.bool_:
        return b"B", arr.astype("u1")
    if np.issubdtype(arr.dtype, np.integer):
        return b"q", arr.astype("<i8")
    if np.issubdtype(arr.dtype, np.floating):
        return b"d", arr.astype("<f8")
    raise SnapshotError(f"unsupported dtype {arr.dtype}")


def dumps(snap: Snapshot) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    kind = snap.kind.encode()
    buf.write(struct.pack("<H", len(kind)))
    buf.write(kind)
    meta = json.dumps(snap.meta, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(snap.arrays)))
    for name, arr in snap.arrays.items():
        arr = np.ascontiguousarray(arr)
        code, data = _code_for(arr)
        key = name.encode()
        buf.write(struct.pack("<H", len(key)))
        buf.write(key)
        buf.write(code)
        buf.write(struct.pack("<B", data.ndim))
        buf.write(struct.pack(f"<{data.ndim}Q", *data.shape))
        buf.write(data.tobytes(order="C"))
    return buf.getvalue()


def loads(raw: bytes) -> Snapshot:
    view = memoryview(raw)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise SnapshotError(f"truncated snapshot at offset {pos}")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(8)) != MAGIC:
        raise SnapshotError("bad magic bytes")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise SnapshotError(f"unsupported snapshot version {version}")
    (klen,) = struct.unpack("<H", take(2))
    kind = bytes(take(klen)).decode()
    (mlen,) = struct.unpack("<I", take(4))
    meta = json.loads(bytes(take(mlen)).decode())
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode()
        code = bytes(take(1))
        if code not in _CODES:
            raise SnapshotError(f"unknown dtype code {code!r} for array {name!r}")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        dtype = _CODES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(bytes(take(nbytes)), dtype=dtype).reshape(shape).copy()
        if code == b"B":
            arr = arr.astype(bool)
        arrays[name] = arr.astype(dtype.newbyteorder("=")) if code != b"B" else arr
    if pos != len(view):
        raise SnapshotError(f"{len(view) - pos} trailing bytes after snapshot")
    return Snapshot(kind, meta, arrays)


def save(path, snap: Snapshot) -> None:
    Path(path).write_bytes(dumps(snap))


def load(path, expect_kind: str | None = None) -> Snapshot:
    snap = loads(Path(path).read_bytes())
    if expect_kind is not None and snap.kind != expect_kind:
        raise SnapshotError(f"{path}: expected a {expect_kind!r} snapshot, found {snap.kind!r}")
    return snap
