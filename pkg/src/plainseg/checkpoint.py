"""Self-describing little-endian checkpoint format.

Layout::

    b"PSEG"  u32 version
    u32 record count
    per record: u32 name length, utf-8 name, u8 dtype tag, u32 rank,
                rank x u64 dims, raw little-endian values
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"PSEG"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays: dict) -> None:
    out = bytearray(MAGIC + struct.pack("<II", VERSION, len(arrays)))
    for name, arr in arrays.items():
        a = np.asarray(arr)
        if a.dtype not in _TAGS:
            a = a.astype(np.float64)
        tag = _TAGS[a.dtype]
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<BI", tag, a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
        out += np.ascontiguousarray(a, dtype=_DTYPES[tag]).tobytes()
    Path(path).write_bytes(bytes(out))


def load_arrays(path) -> dict:
    """Parse the whole file before returning, so a bad file never yields a partial dict."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}, expected {MAGIC!r} (format v{VERSION})")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: format version {version}, this build reads v{VERSION}")
        pos, arrays = 12, {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + n].decode("utf-8")
            pos += n
            tag, rank = struct.unpack_from("<BI", buf, pos)
            pos += 5
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            dt = _DTYPES[tag]
            size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + size > len(buf):
                raise CheckpointError(f"{path}: truncated record {name!r}")
            arr = np.frombuffer(buf, dtype=dt, count=size // dt.itemsize, offset=pos).reshape(dims)
            arrays[name] = arr.astype(dt.newbyteorder("="))
            pos += size
    except (struct.error, KeyError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt checkpoint ({e})") from e
    return arrays


def save_checkpoint(path, model, optimizer=None, extra: dict | None = None) -> None:
    arrays = dict(model.state_dict())
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
    for k, v in (extra or {}).items():
        arrays[f"meta.{k}"] = np.atleast_1d(np.asarray(v, dtype=np.float64))
    save_arrays(path, arrays)


def load_checkpoint(path, model, optimizer=None, strict: bool = True) -> list[str]:
    """Load weights by name; returns names missing from the file (nonstrict mode only)."""
    arrays = load_arrays(path)
    weights = {k: v for k, v in arrays.items() if not k.startswith(("opt.", "meta."))}
    missing = model.load_state_dict(weights, strict=strict)
    if optimizer is not None:
        optimizer.load_state_arrays(arrays)
    return missing
