"""AdamW training on sparse spot supervision, and evaluation."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .data import SlideImage, SpotTable
from .errors import ArgumentError, DataError, NumericError
from .model import DenseExpressionModel
from .objective import MetricsReport, combined_loss_terms, metrics_report, pcc_columns
from .spots import aggregate_spots, mask_matrix

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 5e-4
    weight_decay: float = 1e-4
    epochs: int = 200
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    lam: float = 0.5
    batch_spots: int | None = None
    seed: int = 42
    use_mse: bool = True
    use_pcc: bool = True

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if not self.lr >= 0:
            raise ArgumentError(f"lr must be non-negative, got {self.lr}")
        if self.epochs < 1:
            raise ArgumentError(f"epochs must be >= 1, got {self.epochs}")
        if self.lam < 0:
            raise ArgumentError("lambda must be non-negative")
        if self.batch_spots is not None and self.batch_spots < 2:
            raise ArgumentError("batch_spots must be at least 2 (PCC needs two spots)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


# -------------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray | None],
    state: AdamState,
    cfg: TrainConfig,
) -> dict[str, np.ndarray]:
    """One AdamW update; returns new parameter arrays and advances ``state``.

    Weight decay is decoupled: w <- w * (1 - lr * wd) before the Adam step.
    A missing gradient counts as zero.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    b1, b2 = cfg.betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        decayed = p * (1.0 - cfg.lr * cfg.weight_decay)
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        out[name] = (decayed - cfg.lr * update).astype(p.dtype, copy=False)
    return out


class AdamW:
    def __init__(self, model, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.state = AdamState()

    def step(self) -> None:
        named = dict(self.model.named_parameters())
        new = adamw_step(
            {k: p.data for k, p in named.items()},
            {k: p.grad for k, p in named.items()},
            self.state,
            self.cfg,
        )
        for k, p in named.items():
            p.data = new[k]


# ---------------------------------------------------------------------- dataset


@dataclass
class SlideSample:
    slide: SlideImage
    table: SpotTable
    mask: sp.csr_matrix = field(init=False, repr=False)

    def __post_init__(self):
        if len(self.table) == 0:
            raise DataError("slide has no spots")
        self.mask = mask_matrix(self.table.spots, self.slide.height, self.slide.width)


def as_dataset(samples) -> list[SlideSample]:
    out = []
    for s in samples:
        out.append(s if isinstance(s, SlideSample) else SlideSample(*s))
    if not out:
        raise DataError("dataset is empty")
    return out


@dataclass
class EpochLog:
    epoch: int
    loss: float
    mse: float | None
    pcc_loss: float | None
    pcc_m: float
    step_losses: list[float] = field(default_factory=list)


def _spot_batch(n: int, batch: int | None, rng: np.random.Generator) -> np.ndarray | None:
    if batch is None or batch >= n:
        return None
    return np.sort(rng.choice(n, size=batch, replace=False))


def train_epoch(
    model: DenseExpressionModel,
    dataset: Sequence[SlideSample],
    cfg: TrainConfig,
    optimizer: AdamW,
    rng: np.random.Generator,
    epoch: int = 0,
) -> EpochLog:
    """One optimization step per slide; returns mean loss terms over steps."""
    losses, mses, pccs, pcc_ms = [], [], [], []
    for step, sample in enumerate(dataset):
        idx = _spot_batch(len(sample.table), cfg.batch_spots, rng)
        mask = sample.mask if idx is None else sample.mask[idx]
        target = sample.table.expression() if idx is None else sample.table.expression()[idx]
        target = target.astype(model.dtype)

        model.zero_grad()
        G = model(sample.slide.pixels)  # (M, H, W)
        pred = aggregate_spots(G.transpose(1, 2, 0), None, mask)
        terms = combined_loss_terms(pred, target, cfg.lam, cfg.use_mse, cfg.use_pcc)
        loss = terms.total.item()
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss at epoch {epoch}, step {step}")
        terms.total.backward()
        try:
            optimizer.step()
        except NumericError as exc:
            raise NumericError(f"epoch {epoch}, step {step}: {exc}") from None

        r, degenerate = pcc_columns(pred.detach(), target)
        tvar = target.var(axis=0) >= 1e-8
        pcc_ms.append(float(r.data[tvar].mean()) if tvar.any() else 0.0)
        losses.append(loss)
        mses.append(terms.mse)
        pccs.append(terms.pcc)

    def _mean(xs):
        return None if xs[0] is None else float(np.mean(xs))

    return EpochLog(epoch, float(np.mean(losses)), _mean(mses), _mean(pccs), float(np.mean(pcc_ms)), losses)


class Trainer:
    """Owns the model, optimizer and spot-sampling RNG for a training run."""

    def __init__(self, model: DenseExpressionModel, dataset, cfg: TrainConfig):
        self.model = model
        self.dataset = as_dataset(dataset)
        self.cfg = cfg
        self.optimizer = AdamW(model, cfg)
        self.rng = np.random.default_rng(cfg.seed + 1)
        self.history: list[EpochLog] = []

    def fit(self, epochs: int | None = None) -> list[EpochLog]:
        epochs = self.cfg.epochs if epochs is None else epochs
        for _ in range(epochs):
            log = train_epoch(self.model, self.dataset, self.cfg, self.optimizer, self.rng, len(self.history))
            self.history.append(log)
            logger.debug("epoch %d loss %.6g pcc_m %.4f", log.epoch, log.loss, log.pcc_m)
        return self.history

    @property
    def step_losses(self) -> list[float]:
        return [x for log in self.history for x in log.step_losses]


# -------------------------------------------------------------------- evaluation


def predict_spots(model: DenseExpressionModel, slide: SlideImage, spots) -> np.ndarray:
    """(N, M) float64 spot predictions from one decoded map."""
    G = model.predict_map(slide.pixels).astype(np.float64)
    return aggregate_spots(G, spots).data


def evaluate(model: DenseExpressionModel, dataset, radius_override: float | None = None) -> MetricsReport:
    """Metrics over every spot of every slide, optionally at a fixed radius."""
    preds, targets = [], []
    for sample in as_dataset(dataset):
        table = sample.table if radius_override is None else sample.table.with_radius(radius_override)
        preds.append(predict_spots(model, sample.slide, table.spots))
        targets.append(table.expression())
    return metrics_report(np.concatenate(preds), np.concatenate(targets))
