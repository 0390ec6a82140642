"""Sparse spot loss (MSE + lambda * PCC) and evaluation metrics.

PCC is computed per gene across the spots of a batch, with population
moments: r = cov / (std_a * std_b + eps). A column whose variance is below
eps is degenerate and gets r = 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, DimensionError, NumericError
from .tensor.core import Tensor, make

PCC_EPS = 1e-8


def _check_pair(pred, target, min_rows: int = 1) -> None:
    if pred.shape != target.shape:
        raise DimensionError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if len(pred.shape) != 2:
        raise DimensionError(f"expected (N, M) matrices, got {pred.shape}")
    if pred.shape[0] < min_rows:
        raise ArgumentError(f"need at least {min_rows} spots, got {pred.shape[0]}")


def mse_loss(pred: Tensor, target) -> Tensor:
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    _check_pair(pred, target)
    diff = pred - target
    return (diff * diff).mean()


def pcc(a, b, eps: float = PCC_EPS) -> tuple[float, bool]:
    """Pearson correlation of two vectors; returns (r, degenerate)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"pcc expects equal-length vectors, got {a.shape}, {b.shape}")
    if len(a) < 2:
        raise ArgumentError("pcc needs at least two samples")
    r, degenerate = _pcc_columns(a[:, None], b[:, None], eps)
    return float(r[0]), bool(degenerate[0])


def _pcc_columns(a: np.ndarray, b: np.ndarray, eps: float):
    ac = a - a.mean(axis=0)
    bc = b - b.mean(axis=0)
    va = (ac * ac).mean(axis=0)
    vb = (bc * bc).mean(axis=0)
    cov = (ac * bc).mean(axis=0)
    degenerate = (va < eps) | (vb < eps)
    r = cov / (np.sqrt(va) * np.sqrt(vb) + eps)
    r = np.where(degenerate, 0.0, r)
    return r, degenerate


def pcc_columns(pred: Tensor, target: np.ndarray, eps: float = PCC_EPS) -> tuple[Tensor, np.ndarray]:
    """Differentiable per-column PCC of ``pred`` against a constant ``target``.

    Returns the (M,) correlation tensor and the degenerate-column mask.
    """
    a = pred.data
    b = np.asarray(target, dtype=a.dtype)
    n = a.shape[0]
    ac = a - a.mean(axis=0)
    bc = b - b.mean(axis=0)
    va = (ac * ac).mean(axis=0)
    vb = (bc * bc).mean(axis=0)
    cov = (ac * bc).mean(axis=0)
    sa, sb = np.sqrt(va), np.sqrt(vb)
    degenerate = (va < eps) | (vb < eps)
    denom = sa * sb + eps
    r = np.where(degenerate, 0.0, cov / denom).astype(a.dtype)

    def backward(g):
        safe_sa = np.where(degenerate, 1.0, sa)
        # d cov/da_i = bc_i/n ; d sa/da_i = ac_i/(n sa)
        dr = (bc * denom - cov * sb * ac / safe_sa) / (n * denom * denom)
        dr = np.where(degenerate, 0.0, dr)
        return ((g * dr).astype(a.dtype),)

    return make(r, (pred,), backward, "pcc_columns"), degenerate


def pcc_loss(pred: Tensor, target, eps: float = PCC_EPS) -> Tensor:
    """1 - mean per-gene PCC, skipping genes that are constant in ``target``."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    _check_pair(pred, target, min_rows=2)
    r, _ = pcc_columns(pred, target, eps)
    tc = target - target.mean(axis=0)
    valid = (tc * tc).mean(axis=0) >= eps
    if not valid.any():
        raise NumericError(f"all {target.shape[1]} genes are constant in the target; PCC loss undefined")
    weights = valid.astype(pred.dtype) / valid.sum()
    return 1.0 - (r * weights).sum()


@dataclass
class LossTerms:
    total: Tensor
    mse: float | None = None
    pcc: float | None = None


def combined_loss(
    pred: Tensor,
    target,
    lam: float = 0.5,
    use_mse: bool = True,
    use_pcc: bool = True,
) -> Tensor:
    """mse + lam * pcc_loss; either term can be switched off."""
    return combined_loss_terms(pred, target, lam, use_mse, use_pcc).total


def combined_loss_terms(pred, target, lam=0.5, use_mse=True, use_pcc=True) -> LossTerms:
    if lam < 0:
        raise ArgumentError(f"lambda must be non-negative, got {lam}")
    if not (use_mse or use_pcc):
        raise ArgumentError("at least one loss term must be enabled")
    mse = mse_loss(pred, target) if use_mse else None
    pterm = pcc_loss(pred, target) if use_pcc and lam > 0 else None
    if mse is not None and pterm is not None:
        total = mse + pterm * lam
    elif mse is not None:
        total = mse
    elif pterm is not None:
        total = pterm * lam if lam != 1 else pterm
    else:
        raise ArgumentError("PCC-only objective needs lambda > 0")
    return LossTerms(
        total,
        None if mse is None else mse.item(),
        None if pterm is None else pterm.item(),
    )


@dataclass
class MetricsReport:
    mse: float
    mae: float
    pcc_per_gene: np.ndarray = field(repr=False)
    pcc_f: float
    pcc_s: float
    pcc_m: float
    n_degenerate_genes: int
    valid_genes: np.ndarray = field(repr=False, default=None)

    def rows(self) -> list[tuple[str, float]]:
        return [
            ("mse", self.mse),
            ("mae", self.mae),
            ("pcc_f", self.pcc_f),
            ("pcc_s", self.pcc_s),
            ("pcc_m", self.pcc_m),
            ("n_degenerate_genes", self.n_degenerate_genes),
        ]

    def to_csv(self) -> str:
        lines = ["metric,value"]
        lines += [f"{k},{v!r}" if isinstance(v, float) else f"{k},{v}" for k, v in self.rows()]
        return "\n".join(lines) + "\n"


def metrics_report(pred, target, eps: float = PCC_EPS) -> MetricsReport:
    """MSE, MAE and quartile / median / mean of per-gene PCC.

    Genes constant in the target are excluded from the PCC statistics and
    counted in ``n_degenerate_genes``. Quartiles interpolate linearly between
    order statistics.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_pair(pred, target, min_rows=2)
    diff = pred - target
    mse = float(np.mean(diff * diff))
    mae = float(np.mean(np.abs(diff)))
    r, _ = _pcc_columns(pred, target, eps)
    tc = target - target.mean(axis=0)
    valid = (tc * tc).mean(axis=0) >= eps
    if not valid.any():
        raise NumericError("every gene is constant in the target; PCC undefined")
    per_gene = r[valid]
    return MetricsReport(
        mse=mse,
        mae=mae,
        pcc_per_gene=per_gene,
        pcc_f=float(np.quantile(per_gene, 0.25)),
        pcc_s=float(np.quantile(per_gene, 0.5)),
        pcc_m=float(np.mean(per_gene)),
        n_degenerate_genes=int((~valid).sum()),
        valid_genes=np.flatnonzero(valid),
    )


def summarize_pcc(values) -> tuple[float, float, float]:
    """(first quartile, median, mean) of a PCC vector."""
    v = np.asarray(values, dtype=np.float64)
    return float(np.quantile(v, 0.25)), float(np.quantile(v, 0.5)), float(np.mean(v))
