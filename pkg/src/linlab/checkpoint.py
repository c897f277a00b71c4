"""Checkpoint container: magic, JSON header length, JSON header, raw float64 arrays.

Layout::

    b"LINLABCK" | uint64 LE header size | UTF-8 JSON header | array bytes

The header's ``tensors`` list records ``group``, ``name``, ``shape`` and the
byte ``offset`` of each array relative to the start of the data section.
"""
from __future__ import annotations

import json
import os
import struct

import numpy as np

MAGIC = b"LINLABCK"
VERSION = 1


def write_container(path, header: dict, groups: dict[str, dict[str, np.ndarray]]):
    index, blobs, offset = [], [], 0
    for group in sorted(groups):
        for name in sorted(groups[group]):
            arr = np.ascontiguousarray(groups[group][name], dtype="<f8")
            index.append({"group": group, "name": name, "shape": list(arr.shape), "offset": offset})
            blobs.append(arr.tobytes())
            offset += arr.nbytes
    head = dict(header, format=VERSION, tensors=index)
    raw = json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(raw)))
        f.write(raw)
        for b in blobs:
            f.write(b)
    os.replace(tmp, path)


def read_container(path) -> tuple[dict, dict[str, dict[str, np.ndarray]]]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (size,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + size].decode("utf-8"))
    if header.get("format") != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format {header.get('format')}")
    data = memoryview(blob)[16 + size:]
    groups: dict[str, dict[str, np.ndarray]] = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"])) if t["shape"] else 1
        start = t["offset"]
        if start + 8 * n > len(data):
            raise ValueError(f"{path}: truncated data for {t['group']}/{t['name']}")
        arr = np.frombuffer(data[start:start + 8 * n], dtype="<f8").reshape(t["shape"])
        groups.setdefault(t["group"], {})[t["name"]] = arr.astype(np.float64)
    return header, groups
