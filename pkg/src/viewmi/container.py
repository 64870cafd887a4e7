"""Versioned binary container: JSON header + raw array payload.

Layout: magic 'VMIC', uint32 format version, uint64 header length, UTF-8
JSON header, then each array's bytes C-contiguous in header order. The
header's "arrays" entry pins name/dtype/shape so payloads round-trip
bit-exactly without pickling.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

__all__ = ["save_container", "load_container", "FORMAT_VERSION"]

_MAGIC = b"VMIC"
FORMAT_VERSION = 1


def save_container(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    if "arrays" in header:
        raise ValueError("header key 'arrays' is reserved")
    manifest = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        manifest.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    head = dict(header)
    head["arrays"] = manifest
    head_bytes = json.dumps(head, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(head_bytes)))
        f.write(head_bytes)
        for blob in blobs:
            f.write(blob)


def load_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a viewmi container (bad magic)")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: container version {version}, expected {FORMAT_VERSION}")
    (head_len,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + head_len].decode())
    offset = 16 + head_len
    arrays = {}
    for entry in header.pop("arrays"):
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dtype.itemsize
        arrays[entry["name"]] = (
            np.frombuffer(raw[offset : offset + nbytes], dtype=dtype).reshape(shape).copy()
        )
        offset += nbytes
    if offset != len(raw):
        raise ValueError(f"{path}: payload size mismatch ({len(raw) - offset} trailing bytes)")
    return header, arrays
