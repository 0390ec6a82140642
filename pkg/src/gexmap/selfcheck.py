"""Finite-difference gradient suite over every differentiable building block.

Used by ``gexmap gradcheck`` and by the test suite. Everything runs in
float64 on tiny shapes so the whole suite finishes in seconds.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .decoder import BilinearUp, Decoder, DecoderConfig, DepthToSpaceUp, SAFBFuse, SAFBRefine
from .encoder import PyramidFeatures
from .model import DenseExpressionModel, ModelConfig
from .nn import Module
from .objective import combined_loss, pcc_loss
from .spots import Spot, aggregate_spot, aggregate_spots
from .tensor import (
    GradcheckReport,
    Tensor,
    activation,
    bilinear_resize,
    conv2d,
    depth_to_space,
    depthwise_conv2d,
    gradcheck,
    normalize,
)

F64 = np.float64
# Conv biases feeding batch norm have an exactly zero gradient, so their
# difference quotients are pure round-off; see gradcheck(roundoff=...).
ROUNDOFF = 10.0


@dataclass
class CheckResult:
    name: str
    report: GradcheckReport
    seconds: float

    @property
    def passed(self) -> bool:
        return self.report.passed


def _t(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _module_case(module: Module, inputs: list[Tensor], call: Callable, max_per_input: int = 24):
    named = list(module.named_parameters())
    tensors = inputs + [p for _, p in named]
    names = [f"input{i}" for i in range(len(inputs))] + [n for n, _ in named]
    return (lambda *_: call()), tensors, names, max_per_input


def _cases(seed: int):
    """Yield (name, fn, inputs, names, max_per_input)."""
    rng = np.random.default_rng(seed)

    x, w, b = _t(rng, 3, 7, 7), _t(rng, 4, 3, 3, 3), _t(rng, 4)
    yield "conv2d", lambda x, w, b: conv2d(x, w, b, 1, 1), [x, w, b], None, None
    x, w, b = _t(rng, 2, 7, 7), _t(rng, 3, 2, 3, 3), _t(rng, 3)
    yield "conv2d_stride2", lambda x, w, b: conv2d(x, w, b, 2, 1), [x, w, b], None, None
    x, w, b = _t(rng, 3, 6, 5), _t(rng, 3, 3, 3), _t(rng, 3)
    yield "depthwise_conv2d", lambda x, w, b: depthwise_conv2d(x, w, b), [x, w, b], None, None
    for kind in ("relu", "silu", "sigmoid"):
        x = _t(rng, 4, 5)
        yield f"activation_{kind}", lambda x, k=kind: activation(x, k), [x], None, None
    for kind in ("layer", "batch"):
        x, g, b = _t(rng, 4, 3, 3), _t(rng, 4), _t(rng, 4)
        yield f"normalize_{kind}", lambda x, g, b, k=kind: normalize(x, k, g, b), [x, g, b], None, None
    x = _t(rng, 8, 2, 3)
    yield "depth_to_space", lambda x: depth_to_space(x, 2), [x], None, None
    x = _t(rng, 2, 3, 4)
    yield "bilinear_resize_up", lambda x: bilinear_resize(x, 7, 8), [x], None, None
    x = _t(rng, 2, 6, 5)
    yield "bilinear_resize_down", lambda x: bilinear_resize(x, 3, 4), [x], None, None

    mrng = np.random.default_rng(seed + 1)
    blk = DepthToSpaceUp(4, 4, mrng, 2, F64)
    x = _t(rng, 4, 2, 2)
    yield ("dsub_block", *_module_case(blk, [x], lambda: blk(x)))
    blk2 = BilinearUp(4, 3, mrng, F64)
    x2 = _t(rng, 4, 3, 3)
    yield ("bilinear_up_block", *_module_case(blk2, [x2], lambda: blk2(x2)))
    ref = SAFBRefine(4, mrng, F64)
    x3 = _t(rng, 4, 4, 4)
    yield ("safb_refine", *_module_case(ref, [x3], lambda: ref(x3)))
    for mode in ("channel", "spatial"):
        fuse = SAFBFuse(6, mrng, mode, F64)
        fuse.qkv.weight.data *= 0.3
        a, u = _t(rng, 3, 3, 3), _t(rng, 3, 3, 3)
        yield (f"safb_fuse_{mode}", *_module_case(fuse, [a, u], lambda f=fuse, a=a, u=u: f(a, u)))

    G = _t(rng, 9, 9, 3)
    spots = [Spot(4.3, 4.1, 2.6), Spot(0.5, 8.0, 3.0)]
    yield "aggregate_spot", lambda G: aggregate_spot(G, spots[0]), [G], None, None
    yield "aggregate_spots", lambda G: aggregate_spots(G, spots), [G], None, None

    pred = _t(rng, 6, 4)
    target = rng.uniform(0.0, 3.0, (6, 4))
    yield "pcc_loss", lambda p: pcc_loss(p, target), [pred], None, None
    yield "combined_loss", lambda p: combined_loss(p, target, 0.5), [pred], None, None

    # miniature decoder: L=3, widths <= 8, 8x8 finest level
    dcfg = DecoderConfig(filter_sizes=(4, 8, 8), genes=3, shallow_threshold=2)
    dec = Decoder(dcfg, mrng, F64)
    dec.head.weight.data = mrng.standard_normal(dec.head.weight.shape) * 0.3
    levels = [_t(rng, 4, 8, 8), _t(rng, 8, 4, 4), _t(rng, 8, 2, 2)]
    yield ("decoder_miniature", *_module_case(dec, levels, lambda: dec(PyramidFeatures(levels), 8, 8), 12))

    # miniature end-to-end model with the spot loss on top
    mcfg = ModelConfig(
        genes=3, filter_sizes=(4, 8, 8), patch_size=2, embed_dim=8, heads=2, mlp_ratio=2, max_grid=8, head_init="kaiming"
    )
    model = DenseExpressionModel(mcfg, seed=seed, dtype=F64)
    image = Tensor(rng.uniform(0.0, 1.0, (16, 16, 3)), requires_grad=True)
    mspots = [Spot(4.0, 5.0, 3.0), Spot(11.0, 10.5, 3.5), Spot(8.2, 3.0, 2.5), Spot(12.5, 4.0, 3.0)]
    mtarget = rng.uniform(1.0, 20.0, (len(mspots), 3))

    def end_to_end():
        G = model(image).transpose(1, 2, 0)
        return combined_loss(aggregate_spots(G, mspots), mtarget, 0.5)

    yield ("model_end_to_end", *_module_case(model, [image], end_to_end, 6))


def gradient_suite(seed: int = 0, tol: float = 1e-4) -> list[CheckResult]:
    results = []
    for name, fn, inputs, names, max_per in _cases(seed):
        t0 = time.perf_counter()
        report = gradcheck(fn, inputs, tol=tol, names=names, seed=seed, max_per_input=max_per, roundoff=ROUNDOFF)
        results.append(CheckResult(name, report, time.perf_counter() - t0))
    return results
