"""Spot geometry and circular aggregation of a dense expression map.

A pixel (row i, column j) belongs to a spot centred at (x, y) with radius r
when its centre (j + 0.5, i + 0.5) satisfies (j+0.5-x)^2 + (i+0.5-y)^2 <= r^2.
Spots crossing the slide border are clipped to it.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ArgumentError, DimensionError
from .tensor import Tensor, spmm


class EmptySpotWarning(UserWarning):
    """A spot covers no pixel centre; its prediction is the zero vector."""


@dataclass
class Spot:
    x: float
    y: float
    r: float
    expression: np.ndarray | None = None

    def __post_init__(self):
        if not self.r > 0:
            raise ArgumentError(f"spot radius must be positive, got {self.r}")
        if self.expression is not None:
            self.expression = np.asarray(self.expression, dtype=np.float64)

    def with_radius(self, r: float) -> "Spot":
        return Spot(self.x, self.y, r, self.expression)


@dataclass
class SlideMeta:
    um_per_px: float = 1.0
    height: int | None = None
    width: int | None = None

    def __post_init__(self):
        if not self.um_per_px > 0:
            raise ArgumentError(f"um_per_px must be positive, got {self.um_per_px}")


def um_to_px(r_um: float, meta: SlideMeta) -> float:
    if not r_um > 0:
        raise ArgumentError(f"length in micrometres must be positive, got {r_um}")
    return r_um / meta.um_per_px


def square_bin_radius(side: float) -> float:
    """Radius of the circle with the same area as a square bin of ``side``."""
    if not side > 0:
        raise ArgumentError("bin side must be positive")
    return side / math.sqrt(math.pi)


def check_spot_bounds(spot: Spot, height: int, width: int) -> None:
    if not (-spot.r <= spot.x <= width + spot.r and -spot.r <= spot.y <= height + spot.r):
        raise ArgumentError(f"spot centre ({spot.x}, {spot.y}) lies outside the {height}x{width} slide by more than r={spot.r}")


def circular_mask(spot: Spot, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Row and column indices of covered pixels, in row-major order."""
    r = spot.r
    i_lo = max(0, math.floor(spot.y - r - 0.5))
    i_hi = min(height - 1, math.ceil(spot.y + r - 0.5))
    j_lo = max(0, math.floor(spot.x - r - 0.5))
    j_hi = min(width - 1, math.ceil(spot.x + r - 0.5))
    if i_lo > i_hi or j_lo > j_hi:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    ii, jj = np.meshgrid(np.arange(i_lo, i_hi + 1), np.arange(j_lo, j_hi + 1), indexing="ij")
    inside = (jj + 0.5 - spot.x) ** 2 + (ii + 0.5 - spot.y) ** 2 <= r * r
    return ii[inside].astype(np.int64), jj[inside].astype(np.int64)


def mask_matrix(spots: Sequence[Spot], height: int, width: int) -> sp.csr_matrix:
    """(N, H*W) 0/1 CSR matrix; row n marks the pixels of spot n."""
    indptr = [0]
    cols = []
    for spot in spots:
        ii, jj = circular_mask(spot, height, width)
        cols.append(ii * width + jj)
        indptr.append(indptr[-1] + len(ii))
    indices = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
    data = np.ones(len(indices), dtype=np.float64)
    return sp.csr_matrix((data, indices, np.asarray(indptr)), shape=(len(spots), height * width))


def _flatten_map(G) -> Tensor:
    if not isinstance(G, Tensor):
        G = Tensor(np.asarray(G))
    if G.ndim != 3:
        raise DimensionError(f"expression map must be (H, W, M), got {G.shape}")
    H, W, M = G.shape
    return G.reshape(H * W, M)


def aggregate_spots(G, spots: Sequence[Spot] | None, mask: sp.csr_matrix | None = None) -> Tensor:
    """Per-gene sums of an (H, W, M) map over each spot; returns (N, M).

    Differentiable in ``G``: the gradient of spot n's sum with respect to G is
    the spot's 0/1 mask for every gene. A precomputed ``mask`` from
    :func:`mask_matrix` may be passed instead of ``spots``.
    """
    H, W = G.shape[0], G.shape[1]
    flat = _flatten_map(G)
    if mask is None:
        mask = mask_matrix(spots, H, W)
    elif mask.shape[1] != H * W or (spots is not None and mask.shape[0] != len(spots)):
        raise DimensionError(f"mask matrix {mask.shape} does not match the spots on a {H}x{W} map")
    counts = np.diff(mask.indptr)
    if np.any(counts == 0):
        warnings.warn(f"{int(np.sum(counts == 0))} spot(s) cover no pixel centre", EmptySpotWarning, stacklevel=2)
    return spmm(mask, flat)


def aggregate_spot(G, spot: Spot, height: int | None = None, width: int | None = None) -> Tensor:
    """Per-gene sum of an (H, W, M) map over one spot; returns (M,)."""
    if height is not None and width is not None and (G.shape[0], G.shape[1]) != (height, width):
        raise DimensionError(f"map extents {G.shape[:2]} do not match slide {height}x{width}")
    return aggregate_spots(G, [spot]).reshape(G.shape[2])
