"""Versioned binary checkpoints.

Layout: 8-byte magic ``EGODOA\\x00\\x01``, little-endian uint32 format
version, uint64 header length, UTF-8 JSON header, then the raw tensor
bytes back to back. The header records the model config, free-form
metadata and, per tensor, its name, dtype, shape and byte offset. Nothing
time-dependent is written, so identical state gives identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"EGODOA\x00\x01"
VERSION = 1


def save_checkpoint(path, config: dict, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    index, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        index.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"config": config, "meta": meta or {}, "tensors": index},
                        sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray], dict]:
    """Return ``(config, tensors, meta)``."""
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path} is not an egodoa checkpoint")
        version, hlen = struct.unpack("<IQ", fh.read(12))
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        body = fh.read()
    tensors = {}
    for ent in header["tensors"]:
        dt = np.dtype(ent["dtype"]).newbyteorder("<")
        raw = body[ent["offset"]:ent["offset"] + ent["nbytes"]]
        tensors[ent["name"]] = np.frombuffer(raw, dtype=dt).reshape(ent["shape"]).astype(dt.newbyteorder("="))
    return header["config"], tensors, header["meta"]
