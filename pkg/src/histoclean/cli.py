"""Command-line entry point: ``histoclean <subcommand> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .data import (
    DOMAIN_A,
    AugmentConfig,
    ManifestError,
    eval_transform,
    load_manifest,
    normalize,
    read_image,
    save_manifest,
    split_manifest,
    write_image,
)
from .evaluation import (
    INCEPTION_ENV,
    InceptionExtractor,
    RandomProjectionExtractor,
    evaluate_model,
    format_table,
    render_mosaic,
    write_csv,
)
from .losses import LossWeights
from .synthetic import SyntheticSpec, synthesize_corpus
from .trainer import VARIANTS, ConfigMismatch, NonFiniteLoss, TrainConfig, load_model, read_metrics

log = logging.getLogger("histoclean")

SUBCOMMANDS = ("synth", "split", "train", "eval", "clean", "mosaic")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"}


@dataclass
class Command:
    subcommand: str
    options: argparse.Namespace
    train_config: TrainConfig | None = None
    synth_spec: SyntheticSpec | None = None


def _int_list(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _fraction(text: str) -> float:
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"must lie strictly between 0 and 1, got {v}")
    return v


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    g.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True,
                   help="bit-reproducible execution")
    g.add_argument("-v", "--verbose", action="count", default=0, help="more logging")

    p = argparse.ArgumentParser(
        prog="histoclean", description="Weakly-supervised CycleGAN toolkit for histopathology artifact removal."
    )
    sub = p.add_subparsers(dest="subcommand", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    sub.required = True

    s = sub.add_parser("synth", parents=[common], help="render a synthetic paired-artifact corpus")
    s.add_argument("--scenes", type=int, required=True, help="number of clean scenes")
    s.add_argument("--classes", type=_int_list, default=tuple(range(7)),
                   help="comma-separated artifact class indices 0-6 (default: all)")
    s.add_argument("--tile-size", type=int, default=300, help="tile side in px (default: 300)")
    s.add_argument("--train-fraction", type=_fraction, default=0.8, help="train share of scenes (default: 0.8)")
    s.add_argument("--out", type=Path, required=True, help="output directory")

    s = sub.add_parser("split", parents=[common], help="assign stratified train/test splits")
    s.add_argument("--data", type=Path, required=True, help="input manifest")
    s.add_argument("--fraction", type=_fraction, default=0.8, help="train fraction (default: 0.8)")
    s.add_argument("--out", type=Path, required=True, help="output manifest path")

    s = sub.add_parser("train", parents=[common], help="train one model variant")
    s.add_argument("--variant", choices=VARIANTS, required=True)
    s.add_argument("--data", type=Path, required=True, help="manifest; its train split is used")
    s.add_argument("--out", type=Path, required=True, help="run directory")
    s.add_argument("--epochs", type=int, default=30, help="default: 30")
    s.add_argument("--batch-size", type=int, default=16, help="default: 16")
    s.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate (default: 0.001)")
    s.add_argument("--beta1", type=float, default=0.5, help="default: 0.5")
    s.add_argument("--beta2", type=float, default=0.999, help="default: 0.999")
    s.add_argument("--lr-decay", type=float, default=0.9975, help="per-epoch exponential decay (default: 0.9975)")
    s.add_argument("--weight-decay", type=float, default=1e-5, help="decoupled weight decay (default: 1e-5)")
    s.add_argument("--real-label", type=float, default=0.9, help="smoothed discriminator target (default: 0.9)")
    w = LossWeights()
    for name, default in (("aba", w.aba), ("bab", w.bab), ("a", w.a), ("b", w.b),
                          ("cls", w.cls), ("smooth", w.smooth), ("sparse", w.sparse)):
        s.add_argument(f"--lambda-{name}", type=float, default=default, help=f"default: {default:g}")
    s.add_argument("--arch", choices=("unet", "attention_unet"), default=None,
                   help="generator architecture (default: attention_unet for dpa, else unet)")
    s.add_argument("--base-width", type=int, default=32, help="default: 32")
    s.add_argument("--depth", type=int, default=4, help="default: 4")
    s.add_argument("--disc-widths", type=_int_list, default=(64, 128, 256, 512), help="default: 64,128,256,512")
    s.add_argument("--crop-size", type=int, default=None, help="default: 256 (tile size for smaller tiles)")
    s.add_argument("--out-size", type=int, default=None, help="default: 128 (tile size for smaller tiles)")
    s.add_argument("--pool-size", type=int, default=0, help="fake-image history buffer (default: 0, off)")
    s.add_argument("--workers", type=int, default=0, help="batch-building threads (default: 0)")
    s.add_argument("--resume", type=Path, default=None, help="checkpoint to continue from")

    s = sub.add_parser("eval", parents=[common], help="FID / PSNR / mask report for checkpoints")
    s.add_argument("--checkpoint", type=Path, action="append", required=True,
                   help="checkpoint, run directory or latest marker (repeatable)")
    s.add_argument("--data", type=Path, required=True, help="manifest with train/test splits")
    s.add_argument("--out", type=Path, default=None, help="report directory (default: first run directory)")
    s.add_argument("--extractor", choices=("random", "inception"), default="random",
                   help="feature embedding (default: random projection)")
    s.add_argument("--inception-weights", type=Path, default=None,
                   help=f"Inception-v3 state dict (default: ${INCEPTION_ENV})")
    s.add_argument("--feature-dim", type=int, default=128, help="random projection width (default: 128)")

    s = sub.add_parser("clean", parents=[common], help="clean a manifest's artifact tiles or a directory")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--input", type=Path, required=True, help="manifest file or image directory")
    s.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("mosaic", parents=[common], help="input/output/attention grid")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--n", type=int, default=8, help="number of samples (default: 8)")
    s.add_argument("--split", choices=("train", "test"), default="test")
    s.add_argument("--out", type=Path, required=True, help="output PNG path")
    return p


def parse_args(argv: list[str] | None = None) -> Command:
    parser = _build_parser()
    ns = parser.parse_args(argv)
    cmd = Command(ns.subcommand, ns)
    try:
        if ns.subcommand == "synth":
            cmd.synth_spec = SyntheticSpec(
                n_scenes=ns.scenes, classes=tuple(ns.classes), tile_size=ns.tile_size,
                seed=ns.seed, train_fraction=ns.train_fraction,
            )
        elif ns.subcommand == "train":
            weights = LossWeights(ns.lambda_aba, ns.lambda_bab, ns.lambda_a, ns.lambda_b,
                                  ns.lambda_cls, ns.lambda_smooth, ns.lambda_sparse)
            augment = AugmentConfig()
            if ns.crop_size is not None or ns.out_size is not None:
                augment = AugmentConfig(crop_size=ns.crop_size or augment.crop_size,
                                        out_size=ns.out_size or augment.out_size)
            cmd.train_config = TrainConfig(
                variant=ns.variant, weights=weights, lr=ns.lr, beta1=ns.beta1, beta2=ns.beta2,
                lr_decay=ns.lr_decay, epochs=ns.epochs, batch_size=ns.batch_size,
                weight_decay=ns.weight_decay, real_label=ns.real_label, seed=ns.seed,
                augment=augment, arch=ns.arch, base_width=ns.base_width, depth=ns.depth,
                disc_widths=ns.disc_widths, pool_size=ns.pool_size,
                deterministic=ns.deterministic, workers=ns.workers,
            )
        elif ns.subcommand == "mosaic" and ns.n < 1:
            raise ValueError("--n must be positive")
    except ValueError as exc:
        parser.error(str(exc))
    return cmd


# --- handlers --------------------------------------------------------------------


def _synth(cmd: Command) -> int:
    m = synthesize_corpus(cmd.synth_spec, cmd.options.out)
    print(f"wrote {len(m)} records to {cmd.options.out / 'manifest.txt'}")
    return 0


def _split(cmd: Command) -> int:
    o = cmd.options
    m = split_manifest(load_manifest(o.data), o.fraction, o.seed)
    save_manifest(m, o.out)
    for (dom, split), n in sorted(m.counts().items()):
        print(f"{dom:<12} {split:<6} {n}")
    return 0


def _train(cmd: Command) -> int:
    from dataclasses import replace

    from .plotting import plot_loss_curves
    from .trainer import resume, run_training

    o = cmd.options
    cfg = cmd.train_config
    manifest = load_manifest(o.data)
    if o.crop_size is None and o.out_size is None:
        cfg = replace(cfg, augment=AugmentConfig.for_tile_size(manifest.tile_size))
    if o.resume is not None:
        state = resume(o.resume, manifest, cfg, out_dir=o.out)
    else:
        state = run_training(cfg, manifest, o.out)
    metrics = o.out / "metrics.csv"
    rows = read_metrics(metrics) if metrics.exists() else []
    if rows:
        plot_loss_curves(rows, o.out / "loss_curves.png")
    print(f"trained {cfg.variant} for {state.epoch} epochs ({state.step} steps); latest checkpoint in {o.out}")
    return 0


def _extractor(o: argparse.Namespace):
    if o.extractor == "inception":
        return InceptionExtractor(o.inception_weights)
    return RandomProjectionExtractor(d=o.feature_dim, seed=o.seed)


def _eval(cmd: Command) -> int:
    from .plotting import plot_fid_comparison

    o = cmd.options
    manifest = load_manifest(o.data)
    ex = _extractor(o)
    reports = [evaluate_model(c, manifest, ex) for c in o.checkpoint]
    out = o.out or ckpt.resolve(o.checkpoint[0]).parent
    out.mkdir(parents=True, exist_ok=True)
    print(format_table(reports))
    import json

    (out / "eval_report.json").write_text(
        json.dumps({"reports": [r.to_dict() for r in reports]}, indent=2) + "\n", encoding="utf-8"
    )
    write_csv(reports, out / "eval_report.csv")
    plot_fid_comparison(reports, out / "fid.png")
    print(f"report written to {out}")
    return 0


def _load_for_inference(path: Path):
    model, cfg = load_model(path)
    return model, cfg.augment


def _clean(cmd: Command) -> int:
    o = cmd.options
    model, augment = _load_for_inference(o.checkpoint)
    if o.input.is_dir():
        items = [(p.stem, p) for p in sorted(o.input.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES]
    else:
        m = load_manifest(o.input)
        items = [(r.id, r.image_path) for r in m.records if r.domain == DOMAIN_A]
    if not items:
        raise ValueError(f"no input tiles found in {o.input}")
    o.out.mkdir(parents=True, exist_ok=True)
    for name, path in items:
        x = eval_transform(normalize(read_image(path)), augment)
        out, mask = model.clean(torch.from_numpy(x).permute(2, 0, 1)[None])
        write_image(o.out / f"{name}.png", out[0].permute(1, 2, 0).numpy())
        if mask is not None:
            write_image(o.out / "masks" / f"{name}.png",
                        np.clip(np.rint(mask[0, 0].numpy() * 255), 0, 255).astype(np.uint8))
    print(f"cleaned {len(items)} tiles into {o.out}")
    return 0


def _mosaic(cmd: Command) -> int:
    o = cmd.options
    model, augment = _load_for_inference(o.checkpoint)
    m = load_manifest(o.data)
    recs = [r for r in m.records if r.domain == DOMAIN_A and r.split == o.split][: o.n]
    if not recs:
        raise ValueError(f"no artifact tiles in split {o.split!r}")
    x = np.stack([eval_transform(normalize(read_image(r.image_path)), augment) for r in recs])
    out, mask = model.clean(torch.from_numpy(x).permute(0, 3, 1, 2))
    outs = list(out.permute(0, 2, 3, 1).numpy())
    masks = list(mask[:, 0].numpy()) if mask is not None else None
    render_mosaic(list(x), outs, masks, o.out)
    print(f"wrote {o.out}")
    return 0


HANDLERS = {"synth": _synth, "split": _split, "train": _train, "eval": _eval, "clean": _clean, "mosaic": _mosaic}


def run(cmd: Command) -> int:
    logging.basicConfig(
        level=logging.WARNING - 10 * min(cmd.options.verbose, 2),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return HANDLERS[cmd.subcommand](cmd)
    except (OSError, ValueError, ManifestError, ckpt.CheckpointError, ConfigMismatch, NonFiniteLoss) as exc:
        print(f"histoclean {cmd.subcommand}: error: {exc}", file=sys.stderr)
        return 1


def main(argv: list[str] | None = None) -> int:
    return run(parse_args(argv))


if __name__ == "__main__":
    sys.exit(main())
