"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    magic      4 bytes  b"PRLC"
    version    u16
    hash_len   u16, then the config hash as ASCII
    n_sections u32
    per section:
        name_len u16, name (UTF-8)
        dtype    u8   one of b"f" float32, b"d" float64, b"q" int64, b"b" raw bytes
        ndim     u8, then ndim x u32 dims
        payload  raw little-endian values

Parameters are always stored as float32 sections.  Files are written to a
temporary name and renamed into place, so a failed write never clobbers an
existing checkpoint.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"PRLC"
VERSION = 1

_CODES = {b"f": np.dtype("<f4"), b"d": np.dtype("<f8"), b"q": np.dtype("<i8")}


class CheckpointError(Exception):
    pass


def _encode(name: str, value) -> bytes:
    nb = name.encode("utf-8")
    head = struct.pack("<H", len(nb)) + nb
    if isinstance(value, (bytes, bytearray)):
        return head + b"b" + struct.pack("<BI", 1, len(value)) + bytes(value)
    arr = np.asarray(value)
    if arr.dtype.kind == "f":
        code = b"f" if arr.dtype.itemsize <= 4 else b"d"
    elif arr.dtype.kind in "iub":
        code = b"q"
    else:
        raise CheckpointError(f"section {name!r}: unsupported dtype {arr.dtype}")
    arr = np.asarray(arr, dtype=_CODES[code])  # tobytes() emits C order
    dims = struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape)
    return head + code + dims + arr.tobytes()


def write_checkpoint(path, sections: dict, config_hash: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    hb = config_hash.encode("ascii")
    parts = [MAGIC, struct.pack("<HH", VERSION, len(hb)), hb, struct.pack("<I", len(sections))]
    parts += [_encode(k, v) for k, v in sections.items()]
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            for p in parts:
                fh.write(p)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_checkpoint(path, expected_hash: str | None = None) -> tuple[str, dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"missing checkpoint: {path}")
    buf = path.read_bytes()
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<HH", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    config_hash = buf[pos:pos + hlen].decode("ascii")
    pos += hlen
    if expected_hash is not None and config_hash != expected_hash:
        raise CheckpointError(f"{path}: config hash {config_hash} does not match expected {expected_hash}")
    try:
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        out = {}
        for _ in range(n):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            code = buf[pos:pos + 1]
            pos += 1
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            if code == b"b":
                out[name] = buf[pos:pos + dims[0]]
                pos += dims[0]
                continue
            dt = _CODES.get(code)
            if dt is None:
                raise CheckpointError(f"{path}: section {name!r} has unknown dtype code {code!r}")
            count = int(np.prod(dims)) if dims else 1
            arr = np.frombuffer(buf, dtype=dt, count=count, offset=pos).reshape(dims)
            out[name] = arr.astype(dt.newbyteorder("="))
            pos += count * dt.itemsize
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from None
    return config_hash, out
