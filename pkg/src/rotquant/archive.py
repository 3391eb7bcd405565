"""Tensor archive: a directory holding ``manifest.json`` plus one
``tensors.bin`` blob.

Entries are little-endian, row-major 2-D arrays at 64-byte-aligned offsets.
Supported dtypes are f64, f32 and u8 (the latter for quantization codes).
Writes are deterministic: the same mapping produces byte-identical files.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

_DTYPES = {
    "f64": np.dtype("<f8"),
    "f32": np.dtype("<f4"),
    "u8": np.dtype("u1"),
}
_ALIGN = 64


def _dtype_tag(a: np.ndarray) -> str:
    if a.dtype == np.float64:
        return "f64"
    if a.dtype == np.float32:
        return "f32"
    if a.dtype == np.uint8:
        return "u8"
    raise ValueError(f"unsupported archive dtype {a.dtype}")


def write_archive(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named 2-D arrays to ``path`` (created if missing)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    blob = bytearray()
    for name, arr in tensors.items():
        if arr.ndim != 2:
            raise ValueError(f"archive entry {name!r} must be 2-D, got shape {arr.shape}")
        pad = (-len(blob)) % _ALIGN
        blob.extend(b"\x00" * pad)
        offset = len(blob)
        raw = np.ascontiguousarray(arr)
        data = raw.astype(raw.dtype.newbyteorder("<"), copy=False).tobytes()
        blob.extend(data)
        entries.append(
            {
                "name": name,
                "dtype": _dtype_tag(raw),
                "shape": [int(raw.shape[0]), int(raw.shape[1])],
                "offset": offset,
                "byte_length": len(data),
            }
        )
    manifest = {"entries": entries}
    (root / "tensors.bin").write_bytes(bytes(blob))
    (root / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )


def read_archive(path) -> dict[str, np.ndarray]:
    """Read every entry of an archive directory into a name -> array mapping."""
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    blob = (root / "tensors.bin").read_bytes()
    out: dict[str, np.ndarray] = {}
    for e in manifest["entries"]:
        dt = _DTYPES[e["dtype"]]
        rows, cols = e["shape"]
        start = e["offset"]
        end = start + e["byte_length"]
        arr = np.frombuffer(blob[start:end], dtype=dt).reshape(rows, cols)
        out[e["name"]] = arr.copy()
    return out
