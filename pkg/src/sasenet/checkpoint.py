"""Bit-exact tensor container: magic bytes, JSON manifest, raw LE buffers.

Layout: b"SASE1" | u64le manifest length | manifest JSON (UTF-8) | payload.
The manifest lists (name, dtype, shape, offset) in insertion order; offsets
are relative to the payload start. Round-trips are bitwise exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"SASE1"
_DTYPES = {"f4": "<f4", "f8": "<f8", "i8": "<i8"}


def _dtype_code(dtype: np.dtype) -> str:
    kind = np.dtype(dtype)
    for code, spec in _DTYPES.items():
        if kind == np.dtype(spec):
            return code
    raise ValueError(f"unsupported dtype {dtype}")


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    manifest = []
    payload = bytearray()
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        code = _dtype_code(arr.dtype)
        buf = arr.astype(_DTYPES[code], copy=False).tobytes()
        manifest.append({"name": name, "dtype": code,
                         "shape": list(arr.shape), "offset": len(payload)})
        payload.extend(buf)
    header = json.dumps({"tensors": manifest}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(bytes(payload))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"not a checkpoint file (magic {magic!r})")
        (hlen,) = struct.unpack("<Q", f.read(8))
        manifest = json.loads(f.read(hlen).decode("utf-8"))["tensors"]
        payload = f.read()
    out: dict[str, np.ndarray] = {}
    for entry in manifest:
        dt = np.dtype(_DTYPES[entry["dtype"]])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=start)
        out[entry["name"]] = arr.reshape(shape).copy()
    return out
