"""Flat binary tensor container used for checkpoints and dataset dumps.

One record per tensor: magic ``TNSR``, version (u32), rank (u32), one u64
extent per axis, then the values as little-endian float64. Multi-tensor
files are plain concatenations of records, indexed by a JSON manifest of
name -> byte offset.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"TNSR"
VERSION = 1


class ContainerError(ValueError):
    """Malformed tensor container."""


def write_tensor(fh, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype=np.float64)
    fh.write(MAGIC)
    fh.write(struct.pack("<II", VERSION, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.astype("<f8").tobytes())


def read_tensor(fh) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, rank = struct.unpack("<II", fh.read(8))
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
    count = 1
    for s in shape:
        count *= s
    raw = fh.read(8 * count)
    if len(raw) != 8 * count:
        raise ContainerError("truncated tensor record")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()


def save_tensors(path, tensors: dict) -> dict:
    """Write named tensors to one container; returns name -> offset."""
    offsets = {}
    with open(path, "wb") as fh:
        for name, arr in tensors.items():
            offsets[name] = fh.tell()
            write_tensor(fh, arr)
    return offsets


def load_tensors(path, offsets: dict) -> dict:
    with open(path, "rb") as fh:
        out = {}
        for name, off in offsets.items():
            fh.seek(off)
            out[name] = read_tensor(fh)
    return out


def save_with_manifest(path, tensors: dict, extra: dict | None = None) -> None:
    """Container at ``path`` plus ``path + '.json'`` manifest of offsets."""
    offsets = save_tensors(path, tensors)
    manifest = {"tensors": offsets}
    if extra:
        manifest["meta"] = extra
    with open(str(path) + ".json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_with_manifest(path) -> tuple[dict, dict]:
    with open(str(path) + ".json") as fh:
        manifest = json.load(fh)
    tensors = load_tensors(path, manifest["tensors"])
    return tensors, manifest.get("meta", {})
