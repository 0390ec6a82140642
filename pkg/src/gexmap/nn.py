"""Parameter containers and the small layers shared by encoder and decoder."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .errors import DataError
from .tensor import Tensor, conv2d, depthwise_conv2d, layer_norm, linear, normalize, relu


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until every value lies within two std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def param(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


class Module:
    """Attribute-based parameter registry, in the spirit of torch.nn.Module."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = own.keys() - state.keys()
        extra = state.keys() - own.keys()
        if missing or extra:
            raise DataError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise DataError(f"parameter {name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32):
        self.weight = param(trunc_normal(rng, (d_in, d_out)), dtype)
        self.bias = param(np.zeros(d_out), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, dtype=np.float32):
        self.weight = param(kaiming_uniform(rng, (c_out, c_in, k, k), c_in * k * k), dtype)
        self.bias = param(np.zeros(c_out), dtype)
        self.padding = k // 2

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, 1, self.padding)


class DepthwiseConv2d(Module):
    def __init__(self, channels: int, k: int, rng: np.random.Generator, dtype=np.float32):
        self.weight = param(kaiming_uniform(rng, (channels, k, k), k * k), dtype)
        self.bias = param(np.zeros(channels), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return depthwise_conv2d(x, self.weight, self.bias)


class Norm2d(Module):
    """Layer norm (across channels) or batch norm (per channel) of a map."""

    def __init__(self, channels: int, kind: str, dtype=np.float32, eps: float = 1e-5):
        self.kind = kind
        self.eps = eps
        self.gain = param(np.ones(channels), dtype)
        self.bias = param(np.zeros(channels), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return normalize(x, self.kind, self.gain, self.bias, self.eps)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-5):
        self.eps = eps
        self.gain = param(np.ones(dim), dtype)
        self.bias = param(np.zeros(dim), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


class ConvBlock(Module):
    """Composite block: 3x3 conv, batch norm, ReLU."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, dtype=np.float32):
        self.conv = Conv2d(c_in, c_out, 3, rng, dtype)
        self.norm = Norm2d(c_out, "batch", dtype)

    def forward(self, x: Tensor) -> Tensor:
        return relu(self.norm(self.conv(x)))
