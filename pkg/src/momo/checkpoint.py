"""Checkpoint container.

Layout: the 5 magic bytes ``MOMO1``, a little-endian uint64 header length,
the UTF-8 JSON header (sorted keys), then little-endian float32 payloads in
the order of the header's tensor directory.  Offsets are relative to the
first payload byte.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError

MAGIC = b"MOMO1"


@dataclass
class Checkpoint:
    header: dict
    tensors: dict[str, np.ndarray]

    @property
    def stage(self) -> int:
        return int(self.header["stage"])

    @property
    def step(self) -> int:
        return int(self.header["step"])

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        n = len(prefix)
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def encode_checkpoint(header: dict, tensors: dict[str, np.ndarray]) -> bytes:
    directory = []
    payloads = []
    offset = 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    head = dict(header)
    head["tensors"] = directory
    head_bytes = json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head_bytes)) + head_bytes + b"".join(payloads)


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if blob[:5] != MAGIC:
        raise ConfigError("not a checkpoint file (bad magic)")
    (n,) = struct.unpack("<Q", blob[5:13])
    header = json.loads(blob[13:13 + n].decode("utf-8"))
    base = 13 + n
    tensors = {}
    for entry in header.pop("tensors"):
        start = base + entry["offset"]
        arr = np.frombuffer(blob[start:start + entry["nbytes"]], dtype="<f4")
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return Checkpoint(header, tensors)


def write_checkpoint(path, header: dict, tensors: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(header, tensors))
    tmp.replace(path)
    return path


def read_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
