"""Slides, spot tables and gene preprocessing.

File formats
------------
slide       8-bit RGB PNG or binary PPM (P6)
<slide>.meta  ``key = value`` lines; ``um_per_px`` sets the physical scale
spot table  CSV with header ``x_px,y_px,r_px,<gene>...`` or the ``_um``
            variants, which are converted with the slide scale
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import ArgumentError, DataError
from .spots import SlideMeta, Spot, check_spot_bounds, um_to_px

logger = logging.getLogger(__name__)


@dataclass
class SlideImage:
    pixels: np.ndarray
    meta: SlideMeta = field(default_factory=SlideMeta)

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise DataError(f"slide pixels must be (H, W, 3), got {px.shape}")
        if px.size and (px.min() < 0 or px.max() > 1):
            raise DataError("slide pixel values must lie in [0, 1]")
        self.pixels = px
        self.meta = replace(self.meta, height=px.shape[0], width=px.shape[1])

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class SpotTable:
    spots: list[Spot]
    gene_names: list[str]

    def __post_init__(self):
        M = len(self.gene_names)
        seen = set()
        for n, s in enumerate(self.spots):
            if s.expression is not None and s.expression.shape != (M,):
                raise DataError(f"spot {n} has {s.expression.shape} expression values, expected {M}")
            key = (s.x, s.y)
            if key in seen:
                raise DataError(f"duplicate spot centre {key}")
            seen.add(key)

    def __len__(self) -> int:
        return len(self.spots)

    @property
    def n_genes(self) -> int:
        return len(self.gene_names)

    def expression(self) -> np.ndarray:
        """(N, M) matrix of measured expression."""
        if any(s.expression is None for s in self.spots):
            raise DataError("spot table has spots without expression")
        if not self.spots:
            return np.zeros((0, self.n_genes))
        return np.stack([s.expression for s in self.spots])

    def with_radius(self, r: float) -> "SpotTable":
        return SpotTable([s.with_radius(r) for s in self.spots], list(self.gene_names))

    def subset(self, idx: Sequence[int]) -> "SpotTable":
        return SpotTable([self.spots[i] for i in idx], list(self.gene_names))


# ---------------------------------------------------------------------- slides


def meta_path(slide_path) -> Path:
    return Path(slide_path).with_suffix(".meta")


def read_meta(path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_slide(path) -> SlideImage:
    path = Path(path)
    try:
        with Image.open(path) as im:
            fmt, mode = im.format, im.mode
            if fmt not in ("PNG", "PPM"):
                raise DataError(f"{path}: unsupported image format {fmt}")
            if mode != "RGB":
                raise DataError(f"{path}: expected 8-bit RGB, got mode {mode}")
            arr = np.asarray(im, dtype=np.uint8)
    except DataError:
        raise
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: cannot read slide ({exc})") from None

    sidecar = meta_path(path)
    um = 1.0
    if sidecar.exists():
        fields = read_meta(sidecar)
        try:
            um = float(fields.get("um_per_px", "1.0"))
        except ValueError:
            raise DataError(f"{sidecar}: um_per_px is not a number") from None
        if not um > 0:
            raise DataError(f"{sidecar}: um_per_px must be positive")
    else:
        warnings.warn(f"no sidecar {sidecar.name}; assuming um_per_px=1.0", stacklevel=2)
    return SlideImage(arr.astype(np.float64) / 255.0, SlideMeta(um_per_px=um))


def save_slide(path, slide: SlideImage) -> None:
    """Write the image (PNG or PPM by suffix) and its ``.meta`` sidecar."""
    path = Path(path)
    arr = np.clip(np.rint(slide.pixels * 255.0), 0, 255).astype(np.uint8)
    fmt = "PPM" if path.suffix.lower() in (".ppm", ".pnm") else "PNG"
    Image.fromarray(arr, mode="RGB").save(path, format=fmt)
    meta_path(path).write_text(f"um_per_px = {slide.meta.um_per_px!r}\nheight = {slide.height}\nwidth = {slide.width}\n")


# ------------------------------------------------------------------ spot table


def load_spot_table(path, meta: SlideMeta | None = None) -> SpotTable:
    path = Path(path)
    meta = meta or SlideMeta()
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise DataError(f"{path}: cannot open spot table ({exc})") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty spot table") from None
        if header[:3] == ["x_px", "y_px", "r_px"]:
            scale = None
        elif header[:3] == ["x_um", "y_um", "r_um"]:
            scale = meta
        else:
            raise DataError(f"{path}: header must start with x_px,y_px,r_px or x_um,y_um,r_um")
        genes = header[3:]
        spots = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                values = [float(c) for c in row]
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric field") from None
            if not all(math.isfinite(v) for v in values):
                raise DataError(f"{path}:{lineno}: non-finite value")
            x, y, r = values[:3]
            expr = np.asarray(values[3:])
            if np.any(expr < 0):
                raise DataError(f"{path}:{lineno}: negative expression")
            if scale is not None:
                try:
                    x, y, r = x / scale.um_per_px, y / scale.um_per_px, um_to_px(r, scale)
                except ArgumentError as exc:
                    raise DataError(f"{path}:{lineno}: {exc}") from None
            if not r > 0:
                raise DataError(f"{path}:{lineno}: radius must be positive")
            spot = Spot(x, y, r, expr)
            if meta.height is not None and meta.width is not None:
                try:
                    check_spot_bounds(spot, meta.height, meta.width)
                except ArgumentError as exc:
                    raise DataError(f"{path}:{lineno}: {exc}") from None
            spots.append(spot)
    return SpotTable(spots, genes)


def save_spot_table(path, table: SpotTable) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x_px", "y_px", "r_px", *table.gene_names])
        for s in table.spots:
            w.writerow([repr(float(s.x)), repr(float(s.y)), repr(float(s.r)), *(repr(float(v)) for v in s.expression)])


# ---------------------------------------------------------------- preprocessing


def select_top_genes(table: SpotTable, top_k: int) -> list[int]:
    """Indices (in table order) of the ``top_k`` genes with highest mean expression."""
    M = table.n_genes
    if not 1 <= top_k <= M:
        raise ArgumentError(f"top_k must be in 1..{M}, got {top_k}")
    means = table.expression().mean(axis=0)
    ranked = sorted(range(M), key=lambda g: (-means[g], table.gene_names[g]))
    return sorted(ranked[:top_k])


def restrict_genes(table: SpotTable, names: Sequence[str]) -> SpotTable:
    """Keep the named genes, in the given order."""
    index = {g: i for i, g in enumerate(table.gene_names)}
    missing = [g for g in names if g not in index]
    if missing:
        raise DataError(f"spot table lacks genes {missing[:5]}")
    keep = [index[g] for g in names]
    return SpotTable([Spot(s.x, s.y, s.r, s.expression[keep]) for s in table.spots], list(names))


def log_normalize(table: SpotTable, scale_s: float = 1e4, totals: np.ndarray | None = None) -> SpotTable:
    """v <- log1p(scale_s * v / total) per spot; zero-total spots are dropped.

    ``totals`` defaults to the row sums of ``table``.
    """
    if not scale_s > 0:
        raise ArgumentError("scale_s must be positive")
    if totals is None:
        totals = table.expression().sum(axis=1)
    zero = totals <= 0
    if zero.any():
        warnings.warn(f"dropping {int(zero.sum())} spot(s) with zero total expression", stacklevel=2)
    spots = [
        Spot(s.x, s.y, s.r, np.log1p(scale_s * s.expression / total))
        for s, total, z in zip(table.spots, totals, zero)
        if not z
    ]
    return SpotTable(spots, list(table.gene_names))


def preprocess_genes(
    table: SpotTable,
    top_k: int = 250,
    scale_s: float = 1e4,
    normalize_after_selection: bool = True,
    gene_names: Sequence[str] | None = None,
) -> SpotTable:
    """Keep the top genes by mean, then v <- log1p(scale_s * v / spot_total).

    ``spot_total`` sums the retained genes unless ``normalize_after_selection``
    is False, in which case it sums all genes. Spots with a zero total are
    dropped. Passing ``gene_names`` reuses an earlier selection instead of
    ranking again, which is how held-out data is prepared.
    """
    if not scale_s > 0:
        raise ArgumentError("scale_s must be positive")
    if gene_names is None:
        gene_names = [table.gene_names[g] for g in select_top_genes(table, top_k)]
    kept = restrict_genes(table, gene_names)
    totals = kept.expression().sum(axis=1) if normalize_after_selection else table.expression().sum(axis=1)
    return log_normalize(kept, scale_s, totals)
