"""PIXC checkpoint files.

Layout (little-endian)::

    b"PIXC"  u32 version
    u32 n    n bytes of UTF-8 JSON config text
    records until end of file:
        u32 k, k bytes of tensor name
        u32 rank, rank x u64 extents
        float32 payload, C order

Optimizer moments, when present, are stored as ordinary records named
``adam.m.<param>`` and ``adam.v.<param>``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .model import DenseExpressionModel, ModelConfig
from .train import AdamState, TrainConfig

MAGIC = b"PIXC"
VERSION = 1
_M_PREFIX = "adam.m."
_V_PREFIX = "adam.v."


@dataclass
class Checkpoint:
    model_config: ModelConfig
    tensors: dict[str, np.ndarray]
    train_config: TrainConfig | None = None
    adam: AdamState | None = None
    bn_batch_stats: bool = True
    extra: dict = field(default_factory=dict)
    version: int = VERSION

    @classmethod
    def from_model(cls, model: DenseExpressionModel, train_config=None, adam=None, extra=None) -> "Checkpoint":
        return cls(
            model_config=model.cfg,
            tensors=model.state_dict(),
            train_config=train_config,
            adam=adam,
            bn_batch_stats=model.cfg.bn_batch_stats,
            extra=dict(extra or {}),
        )

    def build_model(self) -> DenseExpressionModel:
        model = DenseExpressionModel(self.model_config, seed=0, dtype=np.float32)
        model.load_state_dict(self.tensors)
        return model


def _config_text(ckpt: Checkpoint, n_tensors: int) -> bytes:
    doc = {
        "model": ckpt.model_config.to_dict(),
        "encoder": ckpt.model_config.encoder_config().to_dict(),
        "decoder": ckpt.model_config.decoder_config().to_dict(),
        "train": None if ckpt.train_config is None else ckpt.train_config.to_dict(),
        "bn_batch_stats": ckpt.bn_batch_stats,
        "optimizer_step": None if ckpt.adam is None else ckpt.adam.step,
        "n_tensors": n_tensors,
        "extra": ckpt.extra,
    }
    return json.dumps(doc, sort_keys=True, indent=1).encode("utf-8")


def _records(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out = sorted(ckpt.tensors.items())
    if ckpt.adam is not None:
        out += [(_M_PREFIX + k, v) for k, v in sorted(ckpt.adam.m.items())]
        out += [(_V_PREFIX + k, v) for k, v in sorted(ckpt.adam.v.items())]
    return out


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    records = _records(ckpt)
    for name, arr in records:
        if np.asarray(arr).dtype != np.float32:
            raise DataError(f"tensor {name} is {np.asarray(arr).dtype}; checkpoints store float32 only")
    text = _config_text(ckpt, len(records))
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", ckpt.version))
        fh.write(struct.pack("<I", len(text)))
        fh.write(text)
        for name, arr in records:
            key = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(struct.pack("<I", len(key)))
            fh.write(key)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


class _Reader:
    def __init__(self, raw: bytes, path: Path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise DataError(f"{self.path}: truncated while reading {what}")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    @property
    def done(self) -> bool:
        return self.pos == len(self.raw)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: cannot read checkpoint ({exc})") from None
    rd = _Reader(raw, path)
    if rd.take(4, "magic") != MAGIC:
        raise DataError(f"{path}: not a PIXC checkpoint (bad magic)")
    version = rd.u32("version")
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    try:
        doc = json.loads(rd.take(rd.u32("config length"), "config text").decode("utf-8"))
        model_cfg = ModelConfig.from_dict(doc["model"])
        train_cfg = None if doc.get("train") is None else TrainConfig.from_dict(doc["train"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: malformed config block ({exc})") from None

    tensors: dict[str, np.ndarray] = {}
    while not rd.done:
        name = rd.take(rd.u32("name length"), "tensor name").decode("utf-8", errors="replace")
        rank = rd.u32(f"rank of {name}")
        shape = struct.unpack(f"<{rank}Q", rd.take(8 * rank, f"extents of {name}"))
        count = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(rd.take(4 * count, f"data of {name}"), dtype="<f4")
        tensors[name] = data.reshape(shape).astype(np.float32)
    if "n_tensors" in doc and doc["n_tensors"] != len(tensors):
        raise DataError(f"{path}: expected {doc['n_tensors']} tensors, found {len(tensors)}")

    adam = None
    moments = {k: v for k, v in tensors.items() if k.startswith((_M_PREFIX, _V_PREFIX))}
    if doc.get("optimizer_step") is not None:
        adam = AdamState(
            step=int(doc["optimizer_step"]),
            m={k[len(_M_PREFIX) :]: v for k, v in moments.items() if k.startswith(_M_PREFIX)},
            v={k[len(_V_PREFIX) :]: v for k, v in moments.items() if k.startswith(_V_PREFIX)},
        )
    params = {k: v for k, v in tensors.items() if k not in moments}
    return Checkpoint(
        model_config=model_cfg,
        tensors=params,
        train_config=train_cfg,
        adam=adam,
        bn_batch_stats=bool(doc.get("bn_batch_stats", True)),
        extra=doc.get("extra", {}),
        version=version,
    )


def load_model(path) -> DenseExpressionModel:
    return load_checkpoint(path).build_model()
