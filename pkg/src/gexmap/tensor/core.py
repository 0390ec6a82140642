"""Reverse-mode autodiff over numpy arrays.

Every differentiable operation builds a new :class:`Tensor` holding its
parents and a closure mapping the output gradient to one gradient per parent.
``Tensor.backward`` walks the graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from ..errors import DimensionError

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference only)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if dtype is None and not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """n-dimensional real array that can take part in a differentiation graph."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = ""

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # ---------------------------------------------------------------- backward
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(node) into ``.grad`` of every reachable node."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar root, got {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = _as_array(grad, self.data.dtype)
            if grad.shape != self.shape:
                raise DimensionError(f"seed gradient shape {grad.shape} != {self.shape}")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        pending = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg

    # --------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of an op; attaches graph edges when needed."""
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


# ---------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return (
            unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return make(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return (
            unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None,
        )

    return make(ad / bd, (a, b), backward, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    return make(ad**exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make(out, (a,), lambda g: (g / (2.0 * out),), "sqrt")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.data)
    return make(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = expit(x)
    return make(x * s, (a,), lambda g: (g * (s + x * s * (1 - s)),), "silu")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make(out, (a,), backward, "softmax")


# ------------------------------------------------------------------ reductions
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if n == 0:
        raise DimensionError("mean over an empty group")
    return tsum(a, axes, keepdims) * (1.0 / n)


# --------------------------------------------------------------------- shaping
def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return make(a.data[idx], (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != axis
        ):
            raise DimensionError(f"cannot concatenate {ref} with {t.shape} on axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


# ---------------------------------------------------------------------- linalg
def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul expects operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return make(ad @ bd, (a, b), backward, "matmul")


def spmm(matrix, x: Tensor) -> Tensor:
    """Constant sparse (or dense) matrix times a 2-D tensor.

    Used for mask sums: with a CSR matrix of 0/1 entries, each output row is a
    sequential, row-major sum of the selected rows of ``x``.
    """
    if x.ndim != 2 or matrix.shape[1] != x.shape[0]:
        raise DimensionError(f"spmm shape mismatch: {matrix.shape} @ {x.shape}")
    out = np.asarray(matrix @ x.data, dtype=x.dtype)
    mt = matrix.T
    return make(out, (x,), lambda g: (np.asarray(mt @ g, dtype=x.dtype),), "spmm")
