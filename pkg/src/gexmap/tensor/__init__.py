"""Minimal reverse-mode autodiff over numpy, with the image ops the model needs."""

from .core import (
    Tensor,
    add,
    as_tensor,
    concat,
    div,
    exp,
    getitem,
    log,
    matmul,
    mul,
    no_grad,
    relu,
    sigmoid,
    silu,
    softmax,
    spmm,
    sqrt,
    sub,
    tmean,
    tsum,
)
from .functional import (
    activation,
    avg_pool2d,
    bilinear_resize,
    conv2d,
    depth_to_space,
    depthwise_conv2d,
    layer_norm,
    linear,
    normalize,
    space_to_depth,
    standardize,
)
from .gradcheck import GradcheckReport, gradcheck
from .kernels import BACKEND

__all__ = [
    "BACKEND",
    "GradcheckReport",
    "Tensor",
    "activation",
    "add",
    "as_tensor",
    "avg_pool2d",
    "bilinear_resize",
    "concat",
    "conv2d",
    "depth_to_space",
    "depthwise_conv2d",
    "div",
    "exp",
    "getitem",
    "gradcheck",
    "layer_norm",
    "linear",
    "log",
    "matmul",
    "mul",
    "no_grad",
    "normalize",
    "relu",
    "sigmoid",
    "silu",
    "softmax",
    "space_to_depth",
    "spmm",
    "sqrt",
    "standardize",
    "sub",
    "tmean",
    "tsum",
]
