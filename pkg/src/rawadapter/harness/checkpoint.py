"""Checkpoint container.

Layout: magic ``RACK``, u32 LE format version, u64 LE header length, a UTF-8
JSON header (sorted keys) listing each tensor's name, shape and byte offset
plus the config snapshot, metric history and optimizer metadata, then the
tensors as contiguous little-endian float32 buffers in name order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"RACK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointNotFoundError(FileNotFoundError):
    pass


@dataclass
class Checkpoint:
    weights: dict
    config: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    optimizer: dict = field(default_factory=dict)
    optimizer_tensors: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    tensors = dict(ckpt.weights)
    tensors.update({f"optim/{k}": v for k, v in ckpt.optimizer_tensors.items()})
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        buf = np.ascontiguousarray(tensors[name], dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(tensors[name])), "offset": offset})
        blobs.append(buf)
        offset += len(buf)
    header = {"tensors": entries, "config": ckpt.config, "history": ckpt.history,
              "optimizer": ckpt.optimizer, "meta": ckpt.meta}
    head = json.dumps(header, sort_keys=True).encode()
    Path(path).write_bytes(MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(head)) + head + b"".join(blobs))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointNotFoundError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {blob[:4]!r})")
    _version, hlen = struct.unpack_from("<IQ", blob, 4)
    start = 16 + hlen
    header = json.loads(blob[16:start])
    weights, optim = {}, {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        lo = start + e["offset"]
        if lo + 4 * n > len(blob):
            raise CheckpointError(f"{path}: tensor {e['name']} truncated")
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=lo).reshape(e["shape"]).astype(np.float32)
        if e["name"].startswith("optim/"):
            optim[e["name"][len("optim/"):]] = arr
        else:
            weights[e["name"]] = arr
    return Checkpoint(weights, header["config"], header["history"], header["optimizer"], optim,
                      header.get("meta", {}))
