"""Toy vision-transformer encoder producing a feature pyramid.

Tokens from non-overlapping patches pass through ``groups`` sequential
transformer groups. After each tapped group the token sequence is folded back
into a (D, H/p, W/p) map, average-pooled to the level stride and projected to
the level's channel width with a 1x1 convolution.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ArgumentError, DimensionError
from .nn import Conv2d, LayerNorm, Linear, Module, param, trunc_normal
from .tensor import Tensor, avg_pool2d, silu, softmax


@dataclass
class EncoderConfig:
    patch_size: int = 4
    embed_dim: int = 64
    heads: int = 4
    levels: int = 4
    groups: int | None = None
    blocks_per_group: int = 1
    mlp_ratio: int = 4
    level_channels: tuple[int, ...] = (16, 32, 64, 64)
    max_grid: int = 64

    def __post_init__(self):
        self.level_channels = tuple(int(c) for c in self.level_channels)
        if self.groups is None:
            self.groups = self.levels
        if self.embed_dim % self.heads:
            raise ArgumentError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.levels < 1 or self.groups < self.levels:
            raise ArgumentError(f"need 1 <= levels <= groups, got levels={self.levels}, groups={self.groups}")
        if len(self.level_channels) != self.levels:
            raise ArgumentError(f"{len(self.level_channels)} level channel widths for {self.levels} levels")

    @property
    def strides(self) -> list[int]:
        return [self.patch_size * 2**l for l in range(self.levels)]

    @property
    def taps(self) -> list[int]:
        """1-based indices of the groups whose output feeds each level."""
        return [(l * self.groups) // self.levels for l in range(1, self.levels + 1)]

    def check_extent(self, height: int, width: int) -> None:
        coarsest = self.strides[-1]
        if height < coarsest or width < coarsest:
            raise DimensionError(f"level stride {coarsest} exceeds image extent {height}x{width}")
        if height % coarsest or width % coarsest:
            raise DimensionError(f"image {height}x{width} not divisible by coarsest stride {coarsest}")
        if height // self.patch_size > self.max_grid or width // self.patch_size > self.max_grid:
            raise DimensionError(f"token grid exceeds max_grid={self.max_grid}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PyramidFeatures:
    """Feature maps (C_l, H/s_l, W/s_l), finest level first."""

    levels: list[Tensor] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, i: int) -> Tensor:
        return self.levels[i]

    @property
    def shapes(self) -> list[tuple]:
        return [t.shape for t in self.levels]


def patchify(image: Tensor, p: int) -> Tensor:
    """(H, W, 3) image to (tokens, p*p*3) rows in raster order."""
    H, W, c = image.shape
    if H % p or W % p:
        raise DimensionError(f"image {H}x{W} not divisible by patch size {p}")
    return image.reshape(H // p, p, W // p, p, c).transpose(0, 2, 1, 3, 4).reshape((H // p) * (W // p), p * p * c)


class PatchEmbed(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32):
        self.patch_size = cfg.patch_size
        self.proj = Linear(cfg.patch_size**2 * 3, cfg.embed_dim, rng, dtype)
        self.row_pos = param(trunc_normal(rng, (cfg.max_grid, cfg.embed_dim)), dtype)
        self.col_pos = param(trunc_normal(rng, (cfg.max_grid, cfg.embed_dim)), dtype)

    def forward(self, image: Tensor) -> Tensor:
        H, W, _ = image.shape
        gh, gw = H // self.patch_size, W // self.patch_size
        tokens = self.proj(patchify(image, self.patch_size))
        D = tokens.shape[1]
        pos = self.row_pos[:gh].reshape(gh, 1, D) + self.col_pos[:gw].reshape(1, gw, D)
        return tokens + pos.reshape(gh * gw, D)


class SelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng, dtype)
        self.proj = Linear(dim, dim, rng, dtype)

    def attend(self, x: Tensor) -> Tensor:
        """Multi-head scaled dot-product attention before the output projection."""
        T, D = x.shape
        hd = D // self.heads
        qkv = self.qkv(x).reshape(T, 3, self.heads, hd).transpose(1, 2, 0, 3)
        q, k, v = qkv[0], qkv[1], qkv[2]
        weights = softmax((q @ k.transpose(0, 2, 1)) * (1.0 / np.sqrt(hd)), axis=-1)
        return (weights @ v).transpose(1, 0, 2).reshape(T, D)

    def forward(self, x: Tensor) -> Tensor:
        return self.proj(self.attend(x))


class TransformerBlock(Module):
    """Pre-norm block: x + attn(LN(x)), then x + MLP(LN(x)) with SiLU."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator, dtype=np.float32):
        self.norm1 = LayerNorm(dim, dtype)
        self.attn = SelfAttention(dim, heads, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.fc1 = Linear(dim, mlp_ratio * dim, rng, dtype)
        self.fc2 = Linear(mlp_ratio * dim, dim, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(silu(self.fc1(self.norm2(x))))


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.embed = PatchEmbed(cfg, rng, dtype)
        self.groups = [
            _Group([TransformerBlock(cfg.embed_dim, cfg.heads, cfg.mlp_ratio, rng, dtype) for _ in range(cfg.blocks_per_group)])
            for _ in range(cfg.groups)
        ]
        self.taps = [Conv2d(cfg.embed_dim, c, 1, rng, dtype) for c in cfg.level_channels]

    def vit_group_forward(self, tokens: Tensor, group_index: int) -> Tensor:
        if not 1 <= group_index <= len(self.groups):
            raise ArgumentError(f"group_index {group_index} outside 1..{len(self.groups)}")
        return self.groups[group_index - 1](tokens)

    def forward(self, image: Tensor) -> PyramidFeatures:
        cfg = self.cfg
        H, W, _ = image.shape
        cfg.check_extent(H, W)
        gh, gw = H // cfg.patch_size, W // cfg.patch_size
        taps = {g: l for l, g in enumerate(cfg.taps)}
        levels: list[Tensor | None] = [None] * cfg.levels
        z = self.embed(image)
        for g in range(1, cfg.groups + 1):
            z = self.vit_group_forward(z, g)
            if g in taps:
                l = taps[g]
                fmap = z.transpose(1, 0).reshape(cfg.embed_dim, gh, gw)
                levels[l] = self.taps[l](avg_pool2d(fmap, 2**l))
        return PyramidFeatures(levels)


class _Group(Module):
    def __init__(self, blocks: list[TransformerBlock]):
        self.blocks = blocks

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


def extract_pyramid(image, encoder: Encoder) -> PyramidFeatures:
    """Run ``encoder`` on an (H, W, 3) image array or tensor."""
    if not isinstance(image, Tensor):
        image = Tensor(np.asarray(image, dtype=encoder.embed.proj.weight.dtype))
    return encoder(image)
