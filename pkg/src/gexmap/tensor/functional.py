"""Differentiable image operators on channel-first (C, h, w) tensors."""

from __future__ import annotations

import numpy as np

from ..errors import ArgumentError, DimensionError
from . import kernels
from .core import Tensor, add, make, relu, sigmoid, silu

# ----------------------------------------------------------------- convolution


def _out_extent(n: int, k: int, stride: int, padding: int) -> int:
    span = n + 2 * padding - k
    if span < 0:
        raise DimensionError(f"kernel {k} larger than padded extent {n + 2 * padding}")
    if span % stride:
        raise DimensionError(f"extent {n} with padding {padding}, kernel {k}, stride {stride} is not exact")
    return span // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding; ``weight`` is (C_out, C_in, k, k)."""
    if x.ndim != 3 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects x (C,h,w) and weight (O,C,k,k), got {x.shape}, {weight.shape}")
    C, h, w = x.shape
    O, Ci, k, k2 = weight.shape
    if Ci != C or k != k2:
        raise DimensionError(f"conv2d weight {weight.shape} does not fit input {x.shape}")
    if k % 2 == 0:
        raise DimensionError(f"conv2d kernel size must be odd, got {k}")
    if bias is not None and bias.shape != (O,):
        raise DimensionError(f"conv2d bias shape {bias.shape} != ({O},)")
    ho = _out_extent(h, k, stride, padding)
    wo = _out_extent(w, k, stride, padding)

    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (padding, padding), (padding, padding)))
    xd = np.ascontiguousarray(xd)
    hp, wp = xd.shape[1], xd.shape[2]
    if k == 1 and stride == 1:
        cols = xd.reshape(C, hp * wp)
    else:
        cols = kernels.im2col(xd, k, stride, ho, wo)
    wmat = weight.data.reshape(O, C * k * k)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(O, ho, wo)

    def backward(g):
        g2 = g.reshape(O, ho * wo)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = np.ascontiguousarray(wmat.T @ g2)
            if k == 1 and stride == 1:
                gxp = gcols.reshape(C, hp, wp)
            else:
                gxp = kernels.col2im(gcols, C, hp, wp, k, stride, ho, wo)
            gx = gxp[:, padding : padding + h, padding : padding + w] if padding else gxp
        if weight.requires_grad:
            gw = (g2 @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=1)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make(out, parents, backward, "conv2d")


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int | None = None) -> Tensor:
    """Per-channel convolution; ``weight`` is (C, k, k), output keeps (C, h, w)."""
    if x.ndim != 3 or weight.ndim != 3:
        raise DimensionError(f"depthwise_conv2d expects x (C,h,w), weight (C,k,k); got {x.shape}, {weight.shape}")
    C, h, w = x.shape
    if weight.shape[0] != C:
        raise DimensionError(f"depthwise weight has {weight.shape[0]} channels, input has {C}")
    k = weight.shape[1]
    if k % 2 == 0 or weight.shape[2] != k:
        raise DimensionError(f"depthwise kernel must be square and odd, got {weight.shape[1:]}")
    if padding is None:
        padding = (k - 1) // 2
    if padding != (k - 1) // 2:
        raise DimensionError("depthwise_conv2d only supports shape-preserving padding (k-1)/2")

    xp = np.ascontiguousarray(np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))))
    wd = np.ascontiguousarray(weight.data)
    out = kernels.dw_forward(xp, wd, h, w)
    if bias is not None:
        out += bias.data[:, None, None]

    def backward(g):
        gxp, gw = kernels.dw_backward(xp, wd, np.ascontiguousarray(g))
        gx = gxp[:, padding : padding + h, padding : padding + w]
        gb = g.sum(axis=(1, 2)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make(out, parents, backward, "depthwise_conv2d")


# ------------------------------------------------------------------ activations

_ACTIVATIONS = {"relu": relu, "silu": silu, "sigmoid": sigmoid}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        return _ACTIVATIONS[kind](x)
    except KeyError:
        raise ArgumentError(f"unknown activation {kind!r}") from None


# ---------------------------------------------------------------- normalization


def standardize(x: Tensor, axes, eps: float = 1e-5) -> Tensor:
    """(x - mean) / sqrt(var + eps) with statistics taken over ``axes``."""
    axes = tuple(ax % x.ndim for ax in axes)
    n = int(np.prod([x.shape[ax] for ax in axes]))
    if n == 0 or not axes:
        raise DimensionError(f"empty normalization group for shape {x.shape}, axes {axes}")
    xd = x.data
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return make(xhat, (x,), backward, "standardize")


def normalize(x: Tensor, kind: str, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer or batch normalization of a (C, h, w) or (B, C, h, w) map.

    ``layer`` normalizes across channels at each site. ``batch`` normalizes
    each channel over batch and spatial sites, always with the current
    statistics (there is no running average).
    """
    if eps <= 0:
        raise ArgumentError("eps must be positive")
    if x.ndim not in (3, 4):
        raise DimensionError(f"normalize expects a (C,h,w) or (B,C,h,w) map, got {x.shape}")
    caxis = x.ndim - 3
    if kind == "layer":
        axes = (caxis,)
    elif kind == "batch":
        axes = tuple(i for i in range(x.ndim) if i != caxis)
    else:
        raise ArgumentError(f"unknown normalization {kind!r}")
    C = x.shape[caxis]
    if gain.size != C or bias.size != C:
        raise DimensionError(f"normalization gain/bias must have {C} entries")
    z = standardize(x, axes, eps)
    return z * gain.reshape(C, 1, 1) + bias.reshape(C, 1, 1)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (token features)."""
    return standardize(x, (-1,), eps) * gain + bias


# ------------------------------------------------------------------ resampling


def depth_to_space(x: Tensor, r: int) -> Tensor:
    """out[c, y*r+dy, x*r+dx] = in[c*r*r + dy*r + dx, y, x]."""
    if x.ndim != 3:
        raise DimensionError(f"depth_to_space expects (C,h,w), got {x.shape}")
    Cr, h, w = x.shape
    if r < 1 or Cr % (r * r):
        raise DimensionError(f"{Cr} channels not divisible by r^2 = {r * r}")
    C = Cr // (r * r)
    out = x.data.reshape(C, r, r, h, w).transpose(0, 3, 1, 4, 2).reshape(C, h * r, w * r)

    def backward(g):
        return (g.reshape(C, h, r, w, r).transpose(0, 2, 4, 1, 3).reshape(Cr, h, w),)

    return make(out, (x,), backward, "depth_to_space")


def space_to_depth(x: Tensor, r: int) -> Tensor:
    """Inverse of :func:`depth_to_space`."""
    if x.ndim != 3:
        raise DimensionError(f"space_to_depth expects (C,h,w), got {x.shape}")
    C, H, W = x.shape
    if r < 1 or H % r or W % r:
        raise DimensionError(f"extent ({H},{W}) not divisible by {r}")
    h, w = H // r, W // r
    out = x.data.reshape(C, h, r, w, r).transpose(0, 2, 4, 1, 3).reshape(C * r * r, h, w)

    def backward(g):
        return (g.reshape(C, r, r, h, w).transpose(0, 3, 1, 4, 2).reshape(C, H, W),)

    return make(out, (x,), backward, "space_to_depth")


def _interp_axis(n_in: int, n_out: int):
    # half-pixel sampling, clamped to the valid range
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = src - i0
    return i0, i1, t


def _interp_matrix(i0, i1, t, n_in: int, dtype) -> np.ndarray:
    m = np.zeros((len(i0), n_in), dtype=dtype)
    rows = np.arange(len(i0))
    np.add.at(m, (rows, i0), 1.0 - t)
    np.add.at(m, (rows, i1), t)
    return m


def bilinear_resize(x: Tensor, height: int, width: int) -> Tensor:
    """Resize a (C, h, w) map with bilinear interpolation (align_corners=False).

    Each output is computed as ``a + t * (b - a)``, so constant fields stay
    exactly constant.
    """
    if x.ndim != 3:
        raise DimensionError(f"bilinear_resize expects (C,h,w), got {x.shape}")
    if height < 1 or width < 1:
        raise ArgumentError("target extents must be positive")
    C, h, w = x.shape
    if (height, width) == (h, w):
        return make(x.data.copy(), (x,), lambda g: (g,), "bilinear_resize")

    dtype = x.dtype
    yi0, yi1, yt = _interp_axis(h, height)
    xi0, xi1, xt = _interp_axis(w, width)
    yt = yt.astype(dtype)
    xt = xt.astype(dtype)
    d = x.data
    top = d[:, yi0, :]
    rows = top + yt[None, :, None] * (d[:, yi1, :] - top)
    left = rows[:, :, xi0]
    out = left + xt[None, None, :] * (rows[:, :, xi1] - left)

    ry = _interp_matrix(yi0, yi1, yt, h, dtype)
    rx = _interp_matrix(xi0, xi1, xt, w, dtype)

    def backward(g):
        return (np.matmul(np.matmul(ry.T, g), rx),)

    return make(out, (x,), backward, "bilinear_resize")


def avg_pool2d(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping ``factor`` x ``factor`` average pooling."""
    if factor == 1:
        return x
    C, h, w = x.shape
    if h % factor or w % factor:
        raise DimensionError(f"extent ({h},{w}) not divisible by pooling factor {factor}")
    ho, wo = h // factor, w // factor
    out = x.data.reshape(C, ho, factor, wo, factor).mean(axis=(2, 4))
    scale = 1.0 / (factor * factor)

    def backward(g):
        up = np.repeat(np.repeat(g, factor, axis=1), factor, axis=2)
        return (up * scale,)

    return make(out, (x,), backward, "avg_pool2d")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight + bias with ``weight`` shaped (in, out)."""
    y = x @ weight
    return add(y, bias) if bias is not None else y
