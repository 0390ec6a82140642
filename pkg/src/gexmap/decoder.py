"""Progressive decoding of a feature pyramid into a dense expression map.

Starting from the coarsest level, each step upsamples the running decoder
feature by two (depth-to-space block on deep levels, bilinear block on
shallow ones), refines the next finer pyramid level, concatenates both and
adds a transposed self-attention residual. A final resize to image extents
and a 1x1 convolution give one channel per gene.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

from .encoder import PyramidFeatures
from .errors import ArgumentError, DimensionError
from .nn import Conv2d, ConvBlock, DepthwiseConv2d, Module, Norm2d
from .tensor import Tensor, bilinear_resize, concat, depth_to_space, relu, silu, softmax

FULL_FILTER_SIZES = (64, 128, 256, 512, 512, 512)
TOY_FILTER_SIZES = (16, 32, 64, 64)


@dataclass
class DecoderConfig:
    filter_sizes: tuple[int, ...] = TOY_FILTER_SIZES
    genes: int = 8
    d: int = 2
    shallow_threshold: int = 3
    attention_mode: str = "channel"

    def __post_init__(self):
        self.filter_sizes = tuple(int(c) for c in self.filter_sizes)
        if self.attention_mode not in ("channel", "spatial"):
            raise ArgumentError(f"attention_mode must be 'channel' or 'spatial', got {self.attention_mode!r}")
        if self.d < 2 or self.d % 2:
            raise ArgumentError("d must be a positive even exponent (2**d channels fold into an r x r block)")
        if self.genes < 1:
            raise ArgumentError("genes must be positive")

    @property
    def levels(self) -> int:
        return len(self.filter_sizes)

    def uses_dsub(self, level: int) -> bool:
        """Branch test for the upsampling step that consumes level ``level``."""
        return level > self.shallow_threshold

    def to_dict(self) -> dict:
        return asdict(self)


def dsub_filters(channels: int, d: int = 2) -> int:
    """Filter count of the expanding convolution, channels * 2**d."""
    return channels * 2**d


def attention_scale(mode: str, channels: int, height: int, width: int) -> float:
    """Square root of the dot-product length: sites for channel mode, channels for spatial."""
    return float(np.sqrt(height * width if mode == "channel" else channels))


class DepthToSpaceUp(Module):
    """conv3x3 (C -> C*2^d), ReLU, depth-to-space, conv3x3 (C -> C_out), ReLU, CB."""

    def __init__(self, c_in: int, c_out: int, rng, d: int = 2, dtype=np.float32):
        self.r = 2 ** (d // 2)
        self.expand = Conv2d(c_in, dsub_filters(c_in, d), 3, rng, dtype)
        self.conv = Conv2d(c_in * 2**d // self.r**2, c_out, 3, rng, dtype)
        self.block = ConvBlock(c_out, c_out, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = depth_to_space(relu(self.expand(x)), self.r)
        return self.block(relu(self.conv(x)))


class BilinearUp(Module):
    """CB (C -> C_out), bilinear x2, CB."""

    def __init__(self, c_in: int, c_out: int, rng, dtype=np.float32):
        self.pre = ConvBlock(c_in, c_out, rng, dtype)
        self.post = ConvBlock(c_out, c_out, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = self.pre(x)
        return self.post(bilinear_resize(x, 2 * x.shape[1], 2 * x.shape[2]))


class SAFBRefine(Module):
    """Residual depthwise refinement of a pyramid level.

    mid = LN(conv1x1(SiLU(DWC(F)))); out = BN(SiLU(DWC(F) + mid)), with one
    depthwise kernel shared by both DWC terms.
    """

    def __init__(self, channels: int, rng, dtype=np.float32):
        self.dwc = DepthwiseConv2d(channels, 3, rng, dtype)
        self.pw = Conv2d(channels, channels, 1, rng, dtype)
        self.ln = Norm2d(channels, "layer", dtype)
        self.bn = Norm2d(channels, "batch", dtype)

    def forward(self, f: Tensor) -> Tensor:
        local = self.dwc(f)
        mid = self.ln(self.pw(silu(local)))
        return self.bn(silu(local + mid))


class SAFBFuse(Module):
    """Concatenate refined and upsampled maps, add a self-attention residual."""

    def __init__(self, channels: int, rng, mode: str = "channel", dtype=np.float32):
        self.mode = mode
        self.qkv = Conv2d(channels, 3 * channels, 1, rng, dtype)

    def attention(self, fu: Tensor) -> Tensor:
        C, h, w = fu.shape
        qkv = self.qkv(fu).reshape(3, C, h * w)
        q, k, v = qkv[0], qkv[1], qkv[2]
        beta = attention_scale(self.mode, C, h, w)
        if self.mode == "channel":
            weights = softmax((q @ k.T) * (1.0 / beta), axis=-1)
            out = weights @ v
        else:
            weights = softmax((q.T @ k) * (1.0 / beta), axis=-1)
            out = (weights @ v.T).T
        return out.reshape(C, h, w)

    def forward(self, refined: Tensor, upsampled: Tensor) -> Tensor:
        if refined.shape[1:] != upsampled.shape[1:]:
            raise DimensionError(f"fusion inputs differ spatially: {refined.shape} vs {upsampled.shape}")
        fu = concat([refined, upsampled], axis=0)
        return fu + self.attention(fu)


class Decoder(Module):
    def __init__(self, cfg: DecoderConfig, rng, dtype=np.float32):
        self.cfg = cfg
        sizes = cfg.filter_sizes
        L = cfg.levels
        self.up: list[Module] = []
        self.refine: list[SAFBRefine] = []
        self.fuse: list[SAFBFuse] = []
        # step for level l (L..2) produces D_{l-1} with 2*C_{l-1} channels
        for l in range(L, 1, -1):
            c_in = sizes[l - 1] if l == L else 2 * sizes[l - 1]
            c_out = sizes[l - 2]
            if cfg.uses_dsub(l):
                self.up.append(DepthToSpaceUp(c_in, c_out, rng, cfg.d, dtype))
            else:
                self.up.append(BilinearUp(c_in, c_out, rng, dtype))
            self.refine.append(SAFBRefine(c_out, rng, dtype))
            self.fuse.append(SAFBFuse(2 * c_out, rng, cfg.attention_mode, dtype))
        head_in = sizes[0] if L == 1 else 2 * sizes[0]
        self.head = Conv2d(head_in, cfg.genes, 1, rng, dtype)
        self.route_counts: Counter = Counter()
        self.route_log: list[tuple[int, str]] = []

    def forward(self, pyr: PyramidFeatures, height: int, width: int) -> Tensor:
        """Return the (M, height, width) expression map."""
        cfg = self.cfg
        L = cfg.levels
        if len(pyr) != L:
            raise DimensionError(f"pyramid has {len(pyr)} levels, decoder expects {L}")
        for l, (feat, c) in enumerate(zip(pyr.levels, cfg.filter_sizes), start=1):
            if feat.ndim != 3 or feat.shape[0] != c:
                raise DimensionError(f"level {l} has shape {feat.shape}, expected {c} channels")
        self.route_log = []
        d = pyr[L - 1]
        for step, l in enumerate(range(L, 1, -1)):
            route = "dsub" if cfg.uses_dsub(l) else "bilinear"
            self.route_log.append((l, route))
            self.route_counts[route] += 1
            up = self.up[step](d)
            target = pyr[l - 2]
            if up.shape[1:] != target.shape[1:]:
                raise DimensionError(f"upsampled level {l} is {up.shape}, level {l - 1} is {target.shape}")
            d = self.fuse[step](self.refine[step](target), up)
        return self.head(bilinear_resize(d, height, width))


def decode_expression_map(pyr: PyramidFeatures, decoder: Decoder, height: int, width: int) -> Tensor:
    """Decode to an (H, W, M) map (gene axis last)."""
    return decoder(pyr, height, width).transpose(1, 2, 0)
