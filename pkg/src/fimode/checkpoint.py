"""Self-describing tensor container with deterministic bytes.

Layout: magic, 8-byte little-endian header length, UTF-8 JSON header, then
the raw float64 tensor data concatenated in the header's order.  The header
carries a format version, a free-form metadata dict and the (name, shape)
index.  Identical contents always produce identical files, which the
reproducibility guarantees rely on (zip-based formats embed timestamps).
"""

from __future__ import annotations

import json

import numpy as np

MAGIC = b"FIMTEN01"
FORMAT_VERSION = 1


def save_tensors(path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    names = sorted(tensors)
    index = [{"name": n, "shape": list(tensors[n].shape)} for n in names]
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "meta": meta, "tensors": index},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        for n in names:
            arr = np.ascontiguousarray(tensors[n], dtype=np.float64)
            fh.write(arr.tobytes())


def load_tensors(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a tensor container")
        header_len = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version")
        tensors = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise ValueError(f"{path}: truncated tensor {entry['name']}")
            tensors[entry["name"]] = np.frombuffer(buf, dtype=np.float64).reshape(shape).copy()
    return header["meta"], tensors
