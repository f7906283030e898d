"""FID, paired PSNR, attention-mask metrics and result mosaics."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt
from .data import (
    DOMAIN_A,
    DOMAIN_B,
    AugmentConfig,
    Manifest,
    TileCache,
    denormalize,
    eval_transform,
    read_image,
    resize_bilinear,
    write_image,
)
from .synthetic import mask_path_for

INCEPTION_ENV = "HISTOCLEAN_INCEPTION_WEIGHTS"

# Published reference FIDs (TCGA tiles, Inception embedding).
# Documentation only: the data is unreleased, so these are not reproducible here.
REFERENCE_FID = {
    "base": (45.09, 70.71),
    "dpa": (44.95, 70.29),
    "cond": (42.62, 67.93),
    "no_aba": (42.38, 67.72),
    "attn": (45.39, 75.33),
    "ws": (34.43, 59.36),
}


# --- features ------------------------------------------------------------------


def _as_nchw(images) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        t = images.detach().to(torch.float32)
        if t.dim() == 4 and t.shape[1] == 3:
            return t
        return t.permute(0, 3, 1, 2)
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    return torch.from_numpy(arr).permute(0, 3, 1, 2)


class RandomProjectionExtractor:
    """Seeded linear embedding: downsample to ``size`` px, flatten, project to ``d``."""

    kind = "seeded_random_projection"

    def __init__(self, d: int = 128, seed: int = 0, size: int = 32):
        self.d, self.seed, self.size = d, seed, size
        rng = np.random.default_rng(seed)
        self.weight = rng.standard_normal((3 * size * size, d)) / np.sqrt(3 * size * size)

    def describe(self) -> dict:
        return {"kind": self.kind, "d": self.d, "seed": self.seed, "size": self.size}

    def __call__(self, batch: torch.Tensor) -> np.ndarray:
        small = F.interpolate(batch, size=(self.size, self.size), mode="bilinear",
                              align_corners=False, antialias=True)
        return small.reshape(len(batch), -1).double().numpy() @ self.weight


class InceptionExtractor:
    """2048-d pool features of Inception-v3, from a local weight file."""

    kind = "pretrained_inception_pool"
    d = 2048

    def __init__(self, weights_path: str | os.PathLike | None = None):
        path = weights_path or os.environ.get(INCEPTION_ENV)
        if not path or not Path(path).is_file():
            raise FileNotFoundError(
                f"Inception weight file not found ({path!r}); set {INCEPTION_ENV} or pass weights_path"
            )
        from torchvision.models import inception_v3

        net = inception_v3(weights=None, aux_logits=True, init_weights=False)
        net.load_state_dict(torch.load(path, map_location="cpu"))
        net.fc = torch.nn.Identity()
        self.net = net.eval()
        self.path = str(path)

    def describe(self) -> dict:
        return {"kind": self.kind, "d": self.d, "weights": self.path}

    @torch.no_grad()
    def __call__(self, batch: torch.Tensor) -> np.ndarray:
        x = F.interpolate(batch, size=(299, 299), mode="bilinear", align_corners=False)
        return self.net(x).double().numpy()


def extract_features(images, ex, batch_size: int = 64) -> np.ndarray:
    """Embed images (``[-1, 1]``, HWC arrays or an NCHW tensor) row by row."""
    t = _as_nchw(images)
    if len(t) == 0:
        raise ValueError("extract_features needs at least one image")
    return np.concatenate([ex(t[i : i + batch_size]) for i in range(0, len(t), batch_size)])


# --- Frechet distance --------------------------------------------------------------


@dataclass
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int


def gaussian_stats(features: np.ndarray) -> FeatureStats:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"need an n x d matrix with n >= 2, got shape {x.shape}")
    sigma = np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1])
    return FeatureStats(x.mean(axis=0), (sigma + sigma.T) / 2, x.shape[0])


def _psd_sqrt(m: np.ndarray, rel_tol: float) -> tuple[np.ndarray, np.ndarray]:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    cutoff = rel_tol * max(vals.max(initial=0.0), 0.0)
    vals = np.where(vals > cutoff, vals, 0.0)
    return (vecs * np.sqrt(vals)) @ vecs.T, vals


def frechet_distance(s1: FeatureStats, s2: FeatureStats, rel_tol: float = 1e-8) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)), clamped at zero.

    ``Tr((S1 S2)^(1/2))`` is evaluated as the sum of square roots of the
    eigenvalues of the symmetric matrix ``S1^(1/2) S2 S1^(1/2)``; eigenvalues
    below ``rel_tol`` times the largest are treated as zero.
    """
    if s1.mu.shape != s2.mu.shape or s1.sigma.shape != s2.sigma.shape:
        raise ValueError(f"dimension mismatch: {s1.mu.shape} vs {s2.mu.shape}")
    for s in (s1, s2):
        if not (np.isfinite(s.mu).all() and np.isfinite(s.sigma).all()):
            raise ValueError("non-finite feature statistics")
    root1, _ = _psd_sqrt(s1.sigma, rel_tol)
    _, vals = _psd_sqrt(root1 @ s2.sigma @ root1, rel_tol)
    tr_covmean = np.sqrt(vals).sum()
    diff = s1.mu - s2.mu
    fd = diff @ diff + np.trace(s1.sigma) + np.trace(s2.sigma) - 2.0 * tr_covmean
    return float(max(fd, 0.0))


def fid_between(x, y, ex) -> float:
    return frechet_distance(gaussian_stats(extract_features(x, ex)), gaussian_stats(extract_features(y, ex)))


# --- paired / mask metrics ---------------------------------------------------------


def paired_psnr(cleaned: np.ndarray, reference: np.ndarray) -> float:
    """PSNR in dB for images in [0, 1]; 99 dB when the MSE is below 1e-10."""
    a = np.asarray(cleaned, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse < 1e-10:
        return 99.0
    return float(-10.0 * np.log10(mse))


def to_unit(x: np.ndarray) -> np.ndarray:
    """[-1, 1] -> [0, 1]."""
    return (np.asarray(x, dtype=np.float64) + 1.0) / 2.0


def mask_tv(mask: np.ndarray) -> float:
    m = np.asarray(mask, dtype=np.float64)
    return float(np.abs(np.diff(m, axis=0)).mean() + np.abs(np.diff(m, axis=1)).mean())


def soft_dice(pred: np.ndarray, target: np.ndarray, eps: float = 1e-6) -> float:
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(target, dtype=np.float64).ravel()
    return float((2 * (p * t).sum() + eps) / (p.sum() + t.sum() + eps))


# --- reports -----------------------------------------------------------------------


@dataclass
class SplitResult:
    fid: float
    n_outputs: int
    n_reference: int
    psnr_cleaned: float | None = None
    psnr_input: float | None = None
    psnr_improved_fraction: float | None = None
    mask_sparsity: float | None = None
    mask_tv: float | None = None
    mask_dice: float | None = None
    classifier_accuracy: float | None = None


@dataclass
class EvalReport:
    variant: str
    extractor: dict
    splits: dict[str, SplitResult] = field(default_factory=dict)
    checkpoint: str | None = None

    @property
    def train_fid(self) -> float | None:
        return self.splits["train"].fid if "train" in self.splits else None

    @property
    def test_fid(self) -> float | None:
        return self.splits["test"].fid if "test" in self.splits else None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["reference_fid"] = dict(zip(("train", "test"), REFERENCE_FID.get(self.variant, (None, None))))
        d["reference_note"] = "TCGA tiles with Inception features; not comparable to this run"
        return d

    def write_json(self, path: str | os.PathLike) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def format_table(reports: Sequence[EvalReport]) -> str:
    """Plain-text comparison with train/test FID rows, one column per variant."""
    cols = [r.variant for r in reports]
    width = max(10, *(len(c) + 2 for c in cols))
    def fmt(v):
        return f"{v:>{width}.2f}" if v is not None else f"{'-':>{width}}"
    lines = [f"{'':<14}" + "".join(f"{c:>{width}}" for c in cols)]
    lines.append(f"{'Tr. FID':<14}" + "".join(fmt(r.train_fid) for r in reports))
    lines.append(f"{'Te. FID':<14}" + "".join(fmt(r.test_fid) for r in reports))
    lines.append(f"{'n (tr/te)':<14}" + "".join(
        f"{(str(r.splits['train'].n_outputs) if 'train' in r.splits else '-') + '/' + (str(r.splits['test'].n_outputs) if 'test' in r.splits else '-'):>{width}}"
        for r in reports))
    psnr = [r.splits.get("test") for r in reports]
    if any(s is not None and s.psnr_cleaned is not None for s in psnr):
        lines.append(f"{'Te. PSNR':<14}" + "".join(fmt(s.psnr_cleaned if s else None) for s in psnr))
    lines.append(f"{'ref. Tr.':<14}" + "".join(fmt(REFERENCE_FID.get(c, (None, None))[0]) for c in cols))
    lines.append(f"{'ref. Te.':<14}" + "".join(fmt(REFERENCE_FID.get(c, (None, None))[1]) for c in cols))
    ex = reports[0].extractor.get("kind", "?") if reports else "?"
    lines.append(f"(features: {ex}; ref. rows are published Inception FIDs on TCGA tiles and are not reproducible here)")
    return "\n".join(lines)


def write_csv(reports: Sequence[EvalReport], path: str | os.PathLike) -> None:
    import csv

    keys = [f for f in SplitResult.__dataclass_fields__]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "split", *keys, "reference_fid", "extractor"])
        for r in reports:
            for split, res in r.splits.items():
                ref = REFERENCE_FID.get(r.variant, (None, None))[0 if split == "train" else 1]
                w.writerow([r.variant, split, *(getattr(res, k) for k in keys), ref, r.extractor.get("kind")])


# --- model evaluation ------------------------------------------------------------------

Cleaner = Callable[[torch.Tensor], "tuple[torch.Tensor, torch.Tensor | None]"]


def _run_chunks(fn: Cleaner, x: torch.Tensor, chunk: int = 32):
    outs, masks = [], []
    for i in range(0, len(x), chunk):
        o, m = fn(x[i : i + chunk])
        outs.append(o)
        if m is not None:
            masks.append(m)
    return torch.cat(outs), (torch.cat(masks) if masks else None)


def evaluate_cleaner(
    clean_fn: Cleaner,
    manifest: Manifest,
    ex,
    augment: AugmentConfig,
    variant: str = "model",
    classifier: Callable[[torch.Tensor], torch.Tensor] | None = None,
    splits: Sequence[str] = ("train", "test"),
) -> EvalReport:
    """Clean every artifact tile of each split and score it against that split's clean tiles."""
    cache = TileCache(manifest.tile_size)
    lookup = manifest.by_id()
    report = EvalReport(variant, ex.describe())
    for split in splits:
        arts = [r for r in manifest.records if r.split == split and r.domain == DOMAIN_A]
        refs = [r for r in manifest.records if r.split == split and r.domain == DOMAIN_B]
        if len(arts) < 2 or len(refs) < 2:
            raise ValueError(f"split {split!r} needs at least 2 artifact and 2 clean tiles")
        x = torch.from_numpy(np.stack([eval_transform(cache.get(r.image_path), augment) for r in arts]))
        x = x.permute(0, 3, 1, 2).contiguous()
        ref = np.stack([eval_transform(cache.get(r.image_path), augment) for r in refs])
        with torch.no_grad():
            out, masks = _run_chunks(clean_fn, x)
        res = SplitResult(fid_between(out, ref, ex), len(arts), len(refs))

        out_hwc = out.permute(0, 2, 3, 1).numpy()
        if all(r.paired_clean_id for r in arts):
            gt = [eval_transform(cache.get(lookup[r.paired_clean_id].image_path), augment) for r in arts]
            pc = np.array([paired_psnr(to_unit(o), to_unit(g)) for o, g in zip(out_hwc, gt)])
            pi = np.array([paired_psnr(to_unit(i), to_unit(g)) for i, g in zip(x.permute(0, 2, 3, 1).numpy(), gt)])
            res.psnr_cleaned, res.psnr_input = float(pc.mean()), float(pi.mean())
            res.psnr_improved_fraction = float((pc > pi).mean())
        if masks is not None:
            m = masks[:, 0].numpy()
            res.mask_sparsity = float(m.mean())
            res.mask_tv = float(np.mean([mask_tv(mm) for mm in m]))
            dice = []
            for r, mm in zip(arts, m):
                mp = mask_path_for(r)
                if mp is not None:
                    target = eval_transform(np.repeat(read_image(mp)[..., :1], 3, 2) / 255.0, augment)[..., 0]
                    dice.append(soft_dice(mm, target))
            res.mask_dice = float(np.mean(dice)) if dice else None
            if classifier is not None:
                with torch.no_grad():
                    logits = torch.cat([classifier(x[i : i + 32] * masks[i : i + 32]) for i in range(0, len(x), 32)])
                labels = torch.tensor([r.label for r in arts])
                res.classifier_accuracy = float((logits.argmax(1) == labels).float().mean())
        report.splits[split] = res
    return report


def evaluate_model(checkpoint: str | os.PathLike, manifest: Manifest, ex) -> EvalReport:
    """FID (and, on synthetic data, PSNR/mask metrics) of a trained checkpoint.

    The checkpoint file is only read.
    """
    from .trainer import load_model

    path = ckpt.resolve(checkpoint)
    model, cfg = load_model(path)
    augment = cfg.augment
    if manifest.tile_size < augment.crop_size:
        raise ValueError(f"manifest tiles ({manifest.tile_size}px) smaller than the model's crop {augment.crop_size}")
    report = evaluate_cleaner(model.clean, manifest, ex, augment, cfg.variant, classifier=model.classifier)
    report.checkpoint = str(path)
    return report


# --- mosaic --------------------------------------------------------------------------------


def _tile_u8(img: np.ndarray, size: int) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[..., None]
    if img.shape[2] == 1:
        # grayscale mask in [0, 1]
        img = np.repeat(np.asarray(img, dtype=np.float32) * 2.0 - 1.0, 3, axis=2)
    if img.dtype == np.uint8:
        img = img.astype(np.float32) / 127.5 - 1.0
    return denormalize(resize_bilinear(img, size))


def mosaic_shape(rows: int, cols: int, tile: int = 128, gutter: int = 4) -> tuple[int, int]:
    return rows * tile + (rows + 1) * gutter, cols * tile + (cols + 1) * gutter


def render_mosaic(
    inputs: Sequence[np.ndarray],
    outputs: Sequence[np.ndarray],
    masks: Sequence[np.ndarray] | None,
    out_path: str | os.PathLike,
    tile: int = 128,
    gutter: int = 4,
) -> Path:
    """Grid with one column per sample: input, output and (optionally) mask rows.

    Images are HWC in [-1, 1] (or uint8); masks are HxW or HxWx1 in [0, 1].
    """
    if len(inputs) != len(outputs) or (masks is not None and len(masks) != len(inputs)):
        raise ValueError("inputs, outputs and masks must have equal length")
    if not inputs:
        raise ValueError("nothing to render")
    rows = [inputs, outputs] + ([masks] if masks is not None else [])
    h, w = mosaic_shape(len(rows), len(inputs), tile, gutter)
    canvas = np.full((h, w, 3), 255, dtype=np.uint8)
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            y = gutter + i * (tile + gutter)
            x = gutter + j * (tile + gutter)
            canvas[y : y + tile, x : x + tile] = _tile_u8(img, tile)
    out_path = Path(out_path)
    write_image(out_path, canvas)
    return out_path
