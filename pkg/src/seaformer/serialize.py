"""Binary tensor files (.stn) and parameter-bundle directories.

The .stn layout is normative: magic bytes ``STNS``, a little-endian uint32
rank, ``rank`` little-endian uint32 dims, then row-major little-endian
float32 data. Parameter bundles are directories of .stn files plus a
``manifest.json`` mapping each tensor's role to its file.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .tensor import DimensionError, Tensor

MAGIC = b"STNS"


class FormatError(ValueError):
    """Malformed .stn payload; ``offset`` is the failing byte position."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def save_stn(path, tensor):
    """Write a tensor as .stn (data is stored as float32)."""
    data = np.ascontiguousarray(tensor.data, dtype="<f4")
    shape = tensor.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(shape)))
        fh.write(struct.pack(f"<{len(shape)}I", *shape))
        fh.write(data.tobytes(order="C"))


def load_stn(path, dtype=np.float64):
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}", 0)
    if len(raw) < 8:
        raise FormatError("truncated before rank field", len(raw))
    (rank,) = struct.unpack_from("<I", raw, 4)
    if rank < 1:
        raise FormatError("rank must be >= 1", 4)
    header_end = 8 + 4 * rank
    if len(raw) < header_end:
        raise FormatError("truncated inside dims header", len(raw))
    dims = struct.unpack_from(f"<{rank}I", raw, 8)
    if any(d < 1 for d in dims):
        raise FormatError(f"dims must be >= 1, got {dims}", 8)
    count = int(np.prod(dims, dtype=np.int64))
    expected = header_end + 4 * count
    if len(raw) != expected:
        raise FormatError(
            f"payload holds {len(raw) - header_end} data bytes, expected {4 * count}",
            min(len(raw), expected))
    flat = np.frombuffer(raw, dtype="<f4", count=count, offset=header_end)
    arr = flat.astype(dtype).reshape(dims)
    if not np.all(np.isfinite(arr)):
        raise FormatError("non-finite values in payload", header_end)
    return Tensor._wrap(arr)


def save_bundle(dirpath, named_tensors):
    """Store {role -> Tensor} as a directory of .stn files plus a manifest."""
    directory = Path(dirpath)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"format": "stn-bundle-v1", "tensors": {}}
    for name, tensor in sorted(named_tensors.items()):
        fname = name.replace("/", "_") + ".stn"
        save_stn(directory / fname, tensor)
        manifest["tensors"][name] = fname
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_bundle(dirpath, dtype=np.float64):
    directory = Path(dirpath)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "stn-bundle-v1":
        raise FormatError(f"unknown bundle format {manifest.get('format')!r}", 0)
    return {name: load_stn(directory / fname, dtype=dtype)
            for name, fname in manifest["tensors"].items()}


def load_label_map(path):
    """Read an integer label map stored as .stn with integer-valued floats."""
    t = load_stn(path, dtype=np.float64)
    arr = t.data
    if arr.ndim != 2:
        raise DimensionError(f"label map must be rank 2, got shape {arr.shape}")
    rounded = np.rint(arr)
    if not np.allclose(arr, rounded, atol=1e-6):
        raise FormatError("label map holds non-integer values", 8)
    return rounded.astype(np.int64)
