"""Seeded synthetic slides with exactly known per-pixel expression.

The image is a clamped sum of low-frequency sinusoids per colour channel.
Expression density is a softplus of a per-gene linear read-out of the
Gaussian-blurred image, so it is a deterministic local function of
appearance. Spot expression is the exact circular sum of that density.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import SlideImage, SpotTable
from .errors import ArgumentError
from .spots import SlideMeta, Spot, aggregate_spots, mask_matrix


@dataclass
class SyntheticTruth:
    density: np.ndarray  # (H, W, M)
    gene_weights: np.ndarray  # (M, 3)
    gene_bias: np.ndarray  # (M,)

    def spot_expression(self, spots) -> np.ndarray:
        """Exact (N, M) circular sums of the density."""
        H, W, _ = self.density.shape
        return aggregate_spots(self.density, spots, mask_matrix(spots, H, W)).data


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def procedural_image(height: int, width: int, rng: np.random.Generator, waves: int = 4) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    channels = []
    for _ in range(3):
        acc = np.zeros((height, width))
        for _ in range(waves):
            period = rng.uniform(16.0, 48.0)
            angle = rng.uniform(0.0, 2 * np.pi)
            phase = rng.uniform(0.0, 2 * np.pi)
            k = 2 * np.pi / period
            acc += np.sin(k * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)
        channels.append(0.5 + 0.18 * acc)
    return np.clip(np.stack(channels, axis=-1), 0.0, 1.0)


def expression_density(pixels: np.ndarray, weights: np.ndarray, bias: np.ndarray, blur_sigma: float = 1.0) -> np.ndarray:
    feats = np.stack([gaussian_filter(pixels[..., c], blur_sigma, mode="reflect") for c in range(3)], axis=-1)
    return softplus((feats - 0.5) @ weights.T + bias)


def grid_centres(height: int, width: int, n: int, radius: float, rng: np.random.Generator) -> np.ndarray:
    """``n`` jittered grid centres whose circles stay inside the slide."""
    span_x, span_y = width - 2 * radius, height - 2 * radius
    if n < 1 or span_x <= 0 or span_y <= 0:
        raise ArgumentError(f"cannot place {n} spots of radius {radius} on a {height}x{width} slide")
    nx = max(1, math.ceil(math.sqrt(n * span_x / span_y)))
    ny = math.ceil(n / nx)
    cw, ch = span_x / nx, span_y / ny
    cells = np.sort(rng.permutation(nx * ny)[:n])
    cy, cx = np.divmod(cells, nx)
    x = radius + (cx + 0.5) * cw + rng.uniform(-0.25, 0.25, n) * cw
    y = radius + (cy + 0.5) * ch + rng.uniform(-0.25, 0.25, n) * ch
    return np.stack([x, y], axis=1)


def random_centres(height: int, width: int, n: int, margin: float, rng: np.random.Generator) -> np.ndarray:
    if width <= 2 * margin or height <= 2 * margin:
        raise ArgumentError("margin leaves no room for spot centres")
    x = rng.uniform(margin, width - margin, n)
    y = rng.uniform(margin, height - margin, n)
    return np.stack([x, y], axis=1)


def spots_from_truth(truth: SyntheticTruth, centres: np.ndarray, radius: float) -> list[Spot]:
    spots = [Spot(float(x), float(y), float(radius)) for x, y in centres]
    expr = truth.spot_expression(spots)
    for s, e in zip(spots, expr):
        s.expression = e
    return spots


def synth_generate(
    height: int,
    width: int,
    genes: int,
    n_spots: int,
    radius_px: float,
    seed: int = 42,
    um_per_px: float = 1.0,
    gene_weights: np.ndarray | None = None,
    gene_bias: np.ndarray | None = None,
) -> tuple[SlideImage, SpotTable, SyntheticTruth]:
    if min(height, width, genes, n_spots) < 1 or not radius_px > 0:
        raise ArgumentError("all synth parameters must be positive")
    rng = np.random.default_rng(seed)
    # 8-bit quantized so a saved PNG reproduces the image exactly
    pixels = np.rint(procedural_image(height, width, rng) * 255.0) / 255.0

    direction = rng.standard_normal((genes, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    weights = direction * rng.uniform(2.0, 4.0, (genes, 1))
    bias = rng.uniform(-1.0, 0.5, genes)
    if gene_weights is not None:
        weights = np.broadcast_to(np.asarray(gene_weights, dtype=np.float64), (genes, 3)).copy()
    if gene_bias is not None:
        bias = np.broadcast_to(np.asarray(gene_bias, dtype=np.float64), (genes,)).copy()

    truth = SyntheticTruth(expression_density(pixels, weights, bias), weights, bias)
    centres = grid_centres(height, width, n_spots, radius_px, rng)
    table = SpotTable(spots_from_truth(truth, centres, radius_px), [f"g_{g}" for g in range(genes)])
    return SlideImage(pixels, SlideMeta(um_per_px=um_per_px)), table, truth
