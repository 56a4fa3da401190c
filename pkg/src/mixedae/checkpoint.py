"""Flat binary checkpoint container.

Layout: 4-byte magic, uint32 format version, uint64 header length, canonical
JSON header (sorted keys, no whitespace), then raw little-endian float64
array blocks in header order. Writing the same state twice produces
byte-identical files; there are no timestamps or compression artifacts.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import DataError

MAGIC = b"MXAE"
FORMAT_VERSION = 1


def save_state(path: str, kind: str, meta: dict, arrays: list[tuple[str, np.ndarray]]) -> None:
    manifest = []
    blocks = []
    offset = 0
    names = set()
    for name, arr in arrays:
        if name in names:
            raise DataError(f"duplicate array name {name!r} in checkpoint")
        names.add(name)
        a = np.ascontiguousarray(arr, dtype="<f8")
        manifest.append({"name": name, "shape": list(a.shape), "offset": offset})
        blocks.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps(
        {"kind": kind, "meta": meta, "arrays": manifest},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blocks:
            fh.write(b)


def load_state(path: str) -> tuple[str, dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise DataError(f"{path}: not a checkpoint file (magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = fh.read()
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        raw = payload[start : start + count * 8]
        if len(raw) != count * 8:
            raise DataError(f"{path}: truncated array block {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return header["kind"], header["meta"], arrays
