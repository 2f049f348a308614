"""CRBS checkpoint files.

Layout::

    b"CRBS" | u32 version | u64 header length | JSON header | f32 payloads

All integers and floats are little-endian. The header holds free-form
metadata plus a ``tensors`` directory mapping name -> {shape, offset} where
offset counts bytes from the start of the payload section.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CRBS"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save(path, tensors: dict[str, np.ndarray], metadata: dict) -> None:
    directory = {}
    offset = 0
    blobs = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        directory[name] = {"shape": list(arr.shape), "offset": offset}
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"metadata": metadata, "tensors": directory}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a CRBS checkpoint")
    version, hlen = struct.unpack_from("<IQ", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    start = 4 + 12
    header = json.loads(raw[start:start + hlen].decode("utf-8"))
    payload = start + hlen
    tensors = {}
    for name, entry in header["tensors"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=payload + entry["offset"])
        tensors[name] = arr.reshape(shape).astype(np.float32)
    return tensors, header["metadata"]


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if head[:4] != MAGIC:
            raise CheckpointError(f"{path}: not a CRBS checkpoint")
        version, hlen = struct.unpack_from("<IQ", head, 4)
        header = json.loads(fh.read(hlen).decode("utf-8"))
    header["version"] = version
    return header
