"""Encoder + decoder wired into one image-to-expression-map model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .decoder import TOY_FILTER_SIZES, Decoder, DecoderConfig
from .encoder import Encoder, EncoderConfig
from .errors import ArgumentError
from .nn import Module, trunc_normal
from .tensor import Tensor, no_grad

HEAD_INITS = ("trunc_normal", "zeros", "kaiming")


@dataclass
class ModelConfig:
    """Both halves of the network; channel widths are shared between them."""

    genes: int = 8
    filter_sizes: tuple[int, ...] = TOY_FILTER_SIZES
    patch_size: int = 4
    embed_dim: int = 64
    heads: int = 4
    groups: int | None = None
    blocks_per_group: int = 1
    mlp_ratio: int = 4
    max_grid: int = 64
    d: int = 2
    shallow_threshold: int = 3
    attention_mode: str = "channel"
    # fixed affine input scaling, (x - mean) / std, applied before patching
    input_mean: float = 0.5
    input_std: float = 0.25
    # Spot sums never see the part of the map in the mask null space, so
    # whatever the head starts with there stays as pixel noise. A small
    # projection-style init keeps it low; "zeros" gives a constant map.
    head_init: str = "trunc_normal"
    # batch norm always uses current statistics; recorded in checkpoints
    bn_batch_stats: bool = True
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.filter_sizes = tuple(int(c) for c in self.filter_sizes)
        if self.head_init not in HEAD_INITS:
            raise ArgumentError(f"head_init must be one of {HEAD_INITS}, got {self.head_init!r}")
        if not self.input_std > 0:
            raise ArgumentError("input_std must be positive")

    @property
    def levels(self) -> int:
        return len(self.filter_sizes)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            patch_size=self.patch_size,
            embed_dim=self.embed_dim,
            heads=self.heads,
            levels=self.levels,
            groups=self.groups,
            blocks_per_group=self.blocks_per_group,
            mlp_ratio=self.mlp_ratio,
            level_channels=self.filter_sizes,
            max_grid=self.max_grid,
        )

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(
            filter_sizes=self.filter_sizes,
            genes=self.genes,
            d=self.d,
            shallow_threshold=self.shallow_threshold,
            attention_mode=self.attention_mode,
        )

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["filter_sizes"] = list(self.filter_sizes)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


class DenseExpressionModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 42, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(cfg.encoder_config(), rng, dtype)
        self.decoder = Decoder(cfg.decoder_config(), rng, dtype)
        head = self.decoder.head.weight
        if cfg.head_init == "zeros":
            head.data = np.zeros_like(head.data)
        elif cfg.head_init == "trunc_normal":
            head.data = trunc_normal(rng, head.shape).astype(self.dtype)

    def astype(self, dtype) -> "DenseExpressionModel":
        super().astype(dtype)
        self.dtype = np.dtype(dtype)
        return self

    def forward(self, image) -> Tensor:
        """(H, W, 3) image -> (M, H, W) expression map tensor."""
        if not isinstance(image, Tensor):
            image = Tensor(np.asarray(image, dtype=self.dtype))
        H, W, _ = image.shape
        cfg = self.cfg
        x = (image - cfg.input_mean) * (1.0 / cfg.input_std)
        return self.decoder(self.encoder(x), H, W)

    def predict_map(self, image) -> np.ndarray:
        """Inference without graph construction; returns an (H, W, M) array."""
        with no_grad():
            g = self.forward(image)
        return np.ascontiguousarray(g.data.transpose(1, 2, 0))
