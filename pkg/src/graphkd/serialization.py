"""Versioned binary containers and canonical JSON helpers.

Two binary formats live here:

* ``GKDC`` checkpoint container -- magic ``GKDC``, version u32 LE, metadata
  length u64 LE, canonical-JSON metadata (UTF-8, includes the tensor
  manifest), then all tensors concatenated as f64 LE row-major in manifest
  order. Teacher and student checkpoints share it.
* ``GSLB`` soft-label cache -- magic ``GSLB``, version u32 LE, count u64 LE,
  class count u32 LE, then per sample a length-prefixed id (u16 LE) and the
  probability row as f64 LE.

Writers are canonical: the same logical content always produces the same
bytes, so write -> read -> write is byte-identical.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError

CHECKPOINT_MAGIC = b"GKDC"
SOFT_LABEL_MAGIC = b"GSLB"
FORMAT_VERSION = 1


def canonical_json(obj) -> str:
    """Deterministic JSON: sorted keys, no whitespace, raw UTF-8."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


class _Reader:
    """Byte cursor that raises FormatError with the failing offset."""

    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated {self.what}: wanted {n} bytes", offset=self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def expect_magic(self, magic: bytes) -> None:
        got = self.take(len(magic))
        if got != magic:
            raise FormatError(f"bad magic in {self.what}: expected {magic!r}, got {got!r}",
                              offset=0)

    def expect_version(self, version: int) -> None:
        at = self.pos
        got = self.u32()
        if got != version:
            raise FormatError(f"unsupported {self.what} version {got}", offset=at)

    def done(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(f"{len(self.data) - self.pos} trailing bytes in {self.what}",
                              offset=self.pos)


# ---------------------------------------------------------------------------
# GKDC checkpoint container
# ---------------------------------------------------------------------------

def write_checkpoint(path, metadata: dict, tensors: list[tuple[str, np.ndarray]]) -> None:
    """Write a checkpoint; the tensor manifest is embedded into the metadata."""
    meta = dict(metadata)
    meta["tensors"] = [
        {"name": name, "rows": int(arr.shape[0]), "cols": int(arr.shape[1])}
        for name, arr in tensors
    ]
    meta_bytes = canonical_json(meta).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(meta_bytes)))
        fh.write(meta_bytes)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        reader = _Reader(fh.read(), "checkpoint")
    reader.expect_magic(CHECKPOINT_MAGIC)
    reader.expect_version(FORMAT_VERSION)
    meta_len = reader.u64()
    at = reader.pos
    try:
        metadata = json.loads(reader.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint metadata: {exc}", offset=at) from exc
    manifest = metadata.get("tensors")
    if not isinstance(manifest, list):
        raise FormatError("checkpoint metadata lacks a tensor manifest", offset=at)
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest:
        rows, cols = int(entry["rows"]), int(entry["cols"])
        raw = reader.take(rows * cols * 8)
        tensors[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(rows, cols).copy()
    reader.done()
    return metadata, tensors


# ---------------------------------------------------------------------------
# GSLB soft-label cache
# ---------------------------------------------------------------------------

def write_soft_labels(path, entries: list[tuple[str, np.ndarray]], num_classes: int) -> None:
    with open(path, "wb") as fh:
        fh.write(SOFT_LABEL_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(entries)))
        fh.write(struct.pack("<I", num_classes))
        for sample_id, probs in entries:
            if probs.size != num_classes:
                raise FormatError(
                    f"soft-label row for '{sample_id}' has {probs.size} entries, "
                    f"expected {num_classes}")
            raw = sample_id.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(np.ascontiguousarray(probs, dtype="<f8").tobytes())


def read_soft_labels(path) -> tuple[list[tuple[str, np.ndarray]], int]:
    with open(path, "rb") as fh:
        reader = _Reader(fh.read(), "soft-label cache")
    reader.expect_magic(SOFT_LABEL_MAGIC)
    reader.expect_version(FORMAT_VERSION)
    count = reader.u64()
    num_classes = reader.u32()
    entries: list[tuple[str, np.ndarray]] = []
    for _ in range(count):
        id_len = reader.u16()
        at = reader.pos
        try:
            sample_id = reader.take(id_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"invalid UTF-8 sample id: {exc}", offset=at) from exc
        raw = reader.take(num_classes * 8)
        entries.append((sample_id, np.frombuffer(raw, dtype="<f8").copy()))
    reader.done()
    return entries, num_classes
