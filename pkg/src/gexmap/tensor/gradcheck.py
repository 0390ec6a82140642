"""Central finite-difference check of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import ArgumentError, NumericError
from .core import Tensor


@dataclass
class GradcheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tol


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    names: Sequence[str] | None = None,
    seed: int = 0,
    max_per_input: int | None = None,
    roundoff: float = 0.0,
) -> GradcheckReport:
    """Compare ``backward`` gradients of ``fn(*inputs)`` with central differences.

    A non-scalar output is reduced to ``sum(out * R)`` for a fixed random R.
    Per element the error is ``|a - f| / max(|a|, |f|, floor)``. The
    difference quotient carries round-off of about ``eps * scale / step``,
    where ``scale`` is ``|loss|`` or, for a reduced output, ``sum(|out * R|)``;
    ``floor`` is chosen so an absolute error below ``roundoff`` times that
    level never fails. Gradients that are exactly zero by construction, such
    as a conv bias feeding batch norm, are thus not judged on noise. With
    ``max_per_input`` only a seeded random subset of each input is perturbed.
    Inputs must be float64.
    """
    rng = np.random.default_rng(seed)
    for t in inputs:
        if t.dtype != np.float64:
            raise ArgumentError("gradcheck runs in 64-bit mode; convert inputs to float64")
    names = list(names) if names is not None else [f"input{i}" for i in range(len(inputs))]

    probe = fn(*inputs)
    weights = None if probe.size == 1 else rng.standard_normal(probe.shape)

    def scalar_loss() -> Tensor:
        out = fn(*inputs)
        if weights is None:
            return out.reshape(()) if out.ndim else out
        return (out * weights).sum()

    for t in inputs:
        t.grad = None
    base = scalar_loss()
    base.backward()
    eps = np.finfo(np.float64).eps
    scale = abs(base.item()) if weights is None else float(np.abs(probe.data * weights).sum())
    floor = max(1e-8, roundoff * eps * max(1.0, scale) / (step * tol))

    report = GradcheckReport(tol=tol)
    for name, t in zip(names, inputs):
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(analytic)):
            raise NumericError(f"non-finite analytic gradient for {name}")
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_input is not None and flat.size > max_per_input:
            idx = np.sort(rng.choice(flat.size, size=max_per_input, replace=False))
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = scalar_loss().item()
            flat[i] = orig - step
            down = scalar_loss().item()
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
        report.max_rel_error[name] = worst
        report.checked[name] = len(idx)
    return report
