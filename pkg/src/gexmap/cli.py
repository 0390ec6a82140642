"""Command-line entry point: ``gexmap {synth,train,predict,eval,gradcheck}``.

Exit codes: 0 success, 2 argument error, 3 data error, 4 numeric failure.

A data directory holds ``slide.png`` (or ``slide.ppm``), its ``slide.meta``
sidecar and ``spots.csv``. A directory without a slide is scanned one level
deep, so several slides can be trained on together.

The training config is ``key = value`` text with ``#`` comments. Keys::

    lr weight_decay epochs lambda seed batch_spots use_mse use_pcc betas
    embed_dim heads patch_size groups blocks_per_group mlp_ratio max_grid
    d shallow_threshold filter_sizes attention_mode head_init
    input_mean input_std
    preprocess (none | log1p) top_k scale_s normalize_after_selection

Command-line flags override the file.
"""

from __future__ import annotations

import argparse
import logging
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (
    SlideImage,
    SpotTable,
    load_slide,
    load_spot_table,
    preprocess_genes,
    restrict_genes,
    save_slide,
    save_spot_table,
    select_top_genes,
)
from .errors import ArgumentError, DataError, DimensionError, NumericError
from .gexm import export_heatmap, write_gexm
from .model import DenseExpressionModel, ModelConfig
from .synth import synth_generate
from .train import SlideSample, Trainer, TrainConfig, evaluate

logger = logging.getLogger("gexmap")

EXIT_OK, EXIT_ARGS, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

_BOOL = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


def _bool(v: str) -> bool:
    try:
        return _BOOL[v.lower()]
    except KeyError:
        raise ValueError(f"not a boolean: {v!r}") from None


def _opt_int(v: str):
    return None if v.lower() in ("none", "") else int(v)


def _floats(v: str):
    return tuple(float(x) for x in v.split(","))


def _ints(v: str):
    return tuple(int(x) for x in v.split(","))


# key -> (section, field, parser)
CONFIG_KEYS = {
    "lr": ("train", "lr", float),
    "weight_decay": ("train", "weight_decay", float),
    "epochs": ("train", "epochs", int),
    "lambda": ("train", "lam", float),
    "seed": ("train", "seed", int),
    "batch_spots": ("train", "batch_spots", _opt_int),
    "use_mse": ("train", "use_mse", _bool),
    "use_pcc": ("train", "use_pcc", _bool),
    "betas": ("train", "betas", _floats),
    "embed_dim": ("model", "embed_dim", int),
    "heads": ("model", "heads", int),
    "patch_size": ("model", "patch_size", int),
    "groups": ("model", "groups", _opt_int),
    "blocks_per_group": ("model", "blocks_per_group", int),
    "mlp_ratio": ("model", "mlp_ratio", int),
    "max_grid": ("model", "max_grid", int),
    "d": ("model", "d", int),
    "shallow_threshold": ("model", "shallow_threshold", int),
    "filter_sizes": ("model", "filter_sizes", _ints),
    "attention_mode": ("model", "attention_mode", str),
    "head_init": ("model", "head_init", str),
    "input_mean": ("model", "input_mean", float),
    "input_std": ("model", "input_std", float),
    "preprocess": ("prep", "preprocess", str),
    "top_k": ("prep", "top_k", int),
    "scale_s": ("prep", "scale_s", float),
    "normalize_after_selection": ("prep", "normalize_after_selection", _bool),
}


@dataclass
class RunConfig:
    train: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    prep: dict = field(default_factory=lambda: {"preprocess": "none", "top_k": 250, "scale_s": 1e4, "normalize_after_selection": True})


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ArgumentError(f"{source}:{lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ArgumentError(f"{source}:{lineno}: unknown key {key!r}")
        section, name, conv = CONFIG_KEYS[key]
        try:
            getattr(cfg, section)[name] = conv(value)
        except ValueError as exc:
            raise ArgumentError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    if cfg.prep["preprocess"] not in ("none", "log1p"):
        raise ArgumentError(f"{source}: preprocess must be 'none' or 'log1p'")
    return cfg


# ---------------------------------------------------------------------- data


def _slide_file(d: Path) -> Path | None:
    for name in ("slide.png", "slide.ppm"):
        if (d / name).is_file():
            return d / name
    return None


def slide_dirs(data: Path) -> list[Path]:
    if not data.is_dir():
        raise DataError(f"{data}: data directory not found")
    if _slide_file(data):
        return [data]
    dirs = sorted(p for p in data.iterdir() if p.is_dir() and _slide_file(p))
    if not dirs:
        raise DataError(f"{data}: no slide.png or slide.ppm found")
    return dirs


def load_sample_dir(d: Path) -> tuple[SlideImage, SpotTable]:
    slide = load_slide(_slide_file(d))
    table = load_spot_table(d / "spots.csv", slide.meta)
    return slide, table


def apply_prep(table: SpotTable, prep: dict, gene_names: list[str] | None = None) -> SpotTable:
    """Gene selection and optional log normalization, as configured.

    With ``gene_names`` the training-time selection is reused.
    """
    if gene_names is None:
        top_k = min(prep["top_k"], table.n_genes)
        if top_k < prep["top_k"]:
            logger.info("top_k=%d exceeds %d genes; keeping all", prep["top_k"], table.n_genes)
        gene_names = [table.gene_names[g] for g in select_top_genes(table, top_k)]
    if prep["preprocess"] == "log1p":
        return preprocess_genes(table, scale_s=prep["scale_s"], normalize_after_selection=prep["normalize_after_selection"], gene_names=gene_names)
    return restrict_genes(table, gene_names)


# ------------------------------------------------------------------ commands


def cmd_synth(args) -> int:
    out = Path(args.out)
    slide, table, truth = synth_generate(args.height, args.width, args.genes, args.spots, args.radius, seed=args.seed)
    out.mkdir(parents=True, exist_ok=True)
    save_slide(out / "slide.png", slide)
    save_spot_table(out / "spots.csv", table)
    write_gexm(out / "truth.gexm", truth.density)
    print(f"wrote {args.height}x{args.width} slide, {len(table)} spots, {args.genes} genes to {out}")
    return EXIT_OK


def _run_config(args) -> RunConfig:
    if args.config is None:
        cfg = RunConfig()
    else:
        path = Path(args.config)
        try:
            text = path.read_text()
        except OSError as exc:
            raise DataError(f"{path}: cannot read config ({exc})") from None
        cfg = parse_config(text, str(path))
    overrides = {"epochs": args.epochs, "lr": args.lr, "weight_decay": args.weight_decay, "lam": args.lam, "seed": args.seed}
    cfg.train.update({k: v for k, v in overrides.items() if v is not None})
    return cfg


def cmd_train(args) -> int:
    cfg = _run_config(args)
    tcfg = TrainConfig(**cfg.train)
    samples = [load_sample_dir(d) for d in slide_dirs(Path(args.data))]
    first = samples[0][1]
    gene_names = None
    prepared = []
    for slide, table in samples:
        table = apply_prep(table, cfg.prep, gene_names)
        gene_names = table.gene_names
        prepared.append(SlideSample(slide, table))
    if any(s.table.gene_names != gene_names for s in prepared):
        raise DataError("slides disagree on gene names")

    mcfg = ModelConfig(genes=len(gene_names), **cfg.model)
    for s in prepared:
        try:
            mcfg.encoder_config().check_extent(s.slide.height, s.slide.width)
        except DimensionError as exc:
            raise DataError(f"slide {s.slide.height}x{s.slide.width} does not fit the model: {exc}") from None
    model = DenseExpressionModel(mcfg, seed=tcfg.seed)
    trainer = Trainer(model, prepared, tcfg)
    logger.info("training %d parameters on %d slide(s), %d genes of %d", model.n_parameters(), len(prepared), len(gene_names), first.n_genes)
    for _ in range(tcfg.epochs):
        log = trainer.fit(1)[-1]
        parts = [f"epoch {log.epoch + 1}", f"loss {log.loss:.6g}"]
        if log.mse is not None:
            parts.append(f"mse {log.mse:.6g}")
        if log.pcc_loss is not None:
            parts.append(f"pcc_loss {log.pcc_loss:.6g}")
        parts.append(f"pcc_m {log.pcc_m:.4f}")
        print(" ".join(parts), flush=True)

    extra = {"gene_names": list(gene_names), "prep": cfg.prep, "loss_log": trainer.step_losses}
    ckpt = Checkpoint.from_model(model, tcfg, trainer.optimizer.state, extra)
    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, ckpt)
    print(f"saved checkpoint to {out}")
    return EXIT_OK


def _load(path) -> tuple[Checkpoint, DenseExpressionModel]:
    ckpt = load_checkpoint(path)
    return ckpt, ckpt.build_model()


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name)


def cmd_predict(args) -> int:
    if args.gene_index is not None and args.heatmap_dir is None:
        raise ArgumentError("--gene-index needs --heatmap-dir")
    ckpt, model = _load(args.ckpt)
    slide = load_slide(args.slide)
    try:
        model.cfg.encoder_config().check_extent(slide.height, slide.width)
    except DimensionError as exc:
        raise DataError(f"{args.slide}: {exc}") from None
    G = model.predict_map(slide.pixels)
    if not np.all(np.isfinite(G)):
        raise NumericError("prediction contains non-finite values")
    write_gexm(args.out, G)
    print(f"wrote {G.shape[0]}x{G.shape[1]}x{G.shape[2]} map to {args.out}")
    if args.heatmap_dir is not None:
        names = ckpt.extra.get("gene_names") or [f"gene{g}" for g in range(G.shape[2])]
        indices = range(G.shape[2]) if args.gene_index is None else [args.gene_index]
        hdir = Path(args.heatmap_dir)
        hdir.mkdir(parents=True, exist_ok=True)
        for g in indices:
            label = names[g] if 0 <= g < len(names) else str(g)
            export_heatmap(G, g, hdir / f"{g:03d}_{_safe(label)}.png")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.radius_px is not None and not args.radius_px > 0:
        raise ArgumentError("--radius-px must be positive")
    ckpt, model = _load(args.ckpt)
    prep = ckpt.extra.get("prep", RunConfig().prep)
    gene_names = ckpt.extra.get("gene_names")
    samples = []
    for d in slide_dirs(Path(args.data)):
        slide, table = load_sample_dir(d)
        samples.append(SlideSample(slide, apply_prep(table, prep, gene_names)))
    report = evaluate(model, samples, radius_override=args.radius_px)
    text = report.to_csv()
    Path(args.report).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .selfcheck import gradient_suite

    results = gradient_suite(seed=args.seed)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:24s} max_rel_err {r.report.worst:.3e}  {status}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise NumericError(f"gradient check failed for {', '.join(failed)}")
    print(f"all {len(results)} checks passed")
    return EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gexmap", description="Dense gene-expression maps from slide images.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("synth", help="generate a synthetic slide with exact truth")
    s.add_argument("--out", required=True)
    s.add_argument("--height", type=int, default=64)
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--genes", type=int, default=8)
    s.add_argument("--spots", type=int, default=32)
    s.add_argument("--radius", type=float, default=4.0, help="spot radius in pixels")
    s.add_argument("--seed", type=int, default=42)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model on spot supervision")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("predict", help="decode a slide into a GEXM expression map")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--slide", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--heatmap-dir")
    r.add_argument("--gene-index", type=int)
    r.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", help="score a checkpoint against spot measurements")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--radius-px", type=float)
    e.add_argument("--report", required=True, help="CSV output path")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ArgumentError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
