"""GEXM expression-map raster and per-gene heatmap export.

Layout (all little-endian)::

    offset  size        field
    0       4           magic b"GEXM"
    4       4           u32 version (1)
    8       12          u32 H, u32 W, u32 M
    20      4*H*W*M     float32 payload, row-major (H, W, M), gene fastest

The gene-fastest layout keeps each pixel's expression vector contiguous.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ArgumentError, DataError, DimensionError

MAGIC = b"GEXM"
VERSION = 1
_HEADER = struct.Struct("<4s4I")


def write_gexm(path, expression_map) -> None:
    arr = np.asarray(expression_map)
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise DimensionError(f"expression map must be a non-empty (H, W, M) array, got {arr.shape}")
    H, W, M = arr.shape
    payload = np.ascontiguousarray(arr, dtype="<f4")
    with Path(path).open("wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, H, W, M))
        fh.write(payload.tobytes())


def read_gexm(path) -> np.ndarray:
    """Return the stored map as an (H, W, M) float32 array."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc})") from None
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, H, W, M = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise DataError(f"{path}: unsupported GEXM version {version}")
    if min(H, W, M) < 1:
        raise DataError(f"{path}: non-positive extents {H}x{W}x{M}")
    expected = _HEADER.size + 4 * H * W * M
    if len(raw) != expected:
        raise DataError(f"{path}: payload is {len(raw) - _HEADER.size} bytes, expected {expected - _HEADER.size}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(H, W, M)
    return data.astype(np.float32)


def heatmap_plane(expression_map, gene_index: int) -> np.ndarray:
    """Min-max stretch of one gene plane to uint8; a constant plane gives 128."""
    arr = np.asarray(expression_map)
    if arr.ndim != 3:
        raise DimensionError(f"expression map must be (H, W, M), got {arr.shape}")
    M = arr.shape[2]
    if not 0 <= gene_index < M:
        raise ArgumentError(f"gene index {gene_index} out of range for {M} genes")
    plane = arr[:, :, gene_index].astype(np.float64)
    lo, hi = plane.min(), plane.max()
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise DataError("expression plane contains non-finite values")
    if hi == lo:
        return np.full(plane.shape, 128, dtype=np.uint8)
    return np.rint((plane - lo) / (hi - lo) * 255.0).astype(np.uint8)


def export_heatmap(expression_map, gene_index: int, path) -> None:
    """Write one gene as an 8-bit grayscale PNG."""
    Image.fromarray(heatmap_plane(expression_map, gene_index), mode="L").save(Path(path), format="PNG")
