"""Self-describing binary checkpoint container.

Layout (all integers little-endian):
    magic   4 bytes  b"RQFS"
    version u32
    hlen    u64      header JSON length
    header  hlen bytes of UTF-8 JSON (sorted keys)
    count   u64      number of named tensors
    per tensor:
        nlen  u16, name (UTF-8)
        ndim  u8, dims u64 * ndim
        data  float64 * prod(dims), C order

Writing is canonical (tensors sorted by name), so save -> load -> save
reproduces the original bytes exactly.
"""

from __future__ import annotations

import json
import struct
from typing import Dict, Tuple

import numpy as np

from rlqfs.errors import CheckpointFormatError, VocabHashMismatch

MAGIC = b"RQFS"
VERSION = 1


def write_checkpoint(path, header: dict, tensors: Dict[str, np.ndarray]) -> None:
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(struct.pack("<Q", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<Q", d))
            f.write(arr.tobytes(order="C"))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(
                f"{self.path}: truncated while reading {what} at offset {self.pos}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))[0]


def read_checkpoint(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data, path)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic at offset 0")
    version = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported format version {version}")
    hlen = r.unpack("<Q", "header length")
    hstart = r.pos
    try:
        header = json.loads(r.take(hlen, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"{path}: unreadable header at offset {hstart} ({e})") from e
    count = r.unpack("<Q", "tensor count")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        nlen = r.unpack("<H", "tensor name length")
        name = r.take(nlen, "tensor name").decode("utf-8")
        ndim = r.unpack("<B", "tensor rank")
        shape = tuple(r.unpack("<Q", f"dim of {name!r}") for _ in range(ndim))
        n = int(np.prod(shape)) if shape else 1
        start = r.pos
        raw = r.take(8 * n, f"payload of {name!r}")
        try:
            tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
        except ValueError as e:
            raise CheckpointFormatError(f"{path}: bad payload for {name!r} at offset {start}") from e
    if r.pos != len(data):
        raise CheckpointFormatError(f"{path}: {len(data) - r.pos} trailing bytes at offset {r.pos}")
    return header, tensors


def check_vocab_hash(header: dict, expected_hash: str, path) -> None:
    got = header.get("vocab_hash")
    if got != expected_hash:
        raise VocabHashMismatch(
            f"{path}: checkpoint vocabulary hash {got!r} does not match the provided vocabulary"
        )
