"""
Versioned array container used for checkpoints and plan/rollout outputs.

Layout::

    b"CPLN" | u32 format version | u64 header length | JSON header | raw arrays

The header is JSON with sorted keys; arrays are little-endian C-order bytes in
header order. Same content always gives the same bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"CPLN"
FORMAT_VERSION = 1


class ContainerError(ValueError):
    pass


def dumps(meta: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> bytes:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        dt = a.dtype.newbyteorder("<") if a.dtype.byteorder == ">" else a.dtype
        blob = a.astype(dt, copy=False).tobytes()
        entries.append({"name": name, "dtype": dt.str, "shape": list(a.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + b"".join(blobs)


def loads(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if data[:4] != MAGIC:
        raise ContainerError("not a courtplan container")
    version, hlen = struct.unpack("<IQ", data[4:16])
    if version != FORMAT_VERSION:
        raise ContainerError(f"container version {version} unsupported")
    header = json.loads(data[16:16 + hlen])
    base = 16 + hlen
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        buf = data[start:start + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return header["meta"], arrays


def save(path: Path | str, meta: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> str:
    data = dumps(meta, arrays)
    Path(path).write_bytes(data)
    return fingerprint_bytes(data)


def load(path: Path | str) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())


def fingerprint_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()[:16]


def fingerprint_file(path: Path | str) -> str:
    return fingerprint_bytes(Path(path).read_bytes())


def fingerprint_arrays(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode() + str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]
