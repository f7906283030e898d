"""Tile manifests, splitting, augmentation and unpaired batch production.

Images live on disk as 8-bit RGB PNG tiles. In memory a tile is an
``H x W x 3`` float32 array scaled to ``[-1, 1]`` (``x / 127.5 - 1``), which
is the range the tanh generators emit. Batches handed to the networks are
channels-first torch tensors.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

CLASS_NAMES = (
    "pen_marker",
    "ink",
    "blur",
    "air_bubble",
    "tissue_fold",
    "dust",
    "filament",
)
NUM_CLASSES = len(CLASS_NAMES)

DOMAIN_A = "A_artifact"
DOMAIN_B = "B_clean"
DOMAINS = (DOMAIN_A, DOMAIN_B)
MAGNIFICATIONS = ("x10", "x40")
SPLITS = ("train", "test")

RECORD_FIELDS = (
    "id",
    "image_path",
    "domain",
    "label",
    "magnification",
    "source_id",
    "split",
    "paired_clean_id",
)


class ManifestError(ValueError):
    """Raised for malformed or inconsistent manifests."""


@dataclass(frozen=True)
class TileRecord:
    id: str
    image_path: Path
    domain: str
    label: int | None
    magnification: str
    source_id: str
    split: str
    paired_clean_id: str | None = None

    def validate(self) -> None:
        if self.domain not in DOMAINS:
            raise ManifestError(f"{self.id}: unknown domain {self.domain!r}")
        if self.domain == DOMAIN_B and self.label is not None:
            raise ManifestError(f"{self.id}: label on clean tile")
        if self.domain == DOMAIN_A:
            if self.label is None:
                raise ManifestError(f"{self.id}: artifact tile without label")
            if not 0 <= self.label < NUM_CLASSES:
                raise ManifestError(f"{self.id}: label {self.label} outside [0,{NUM_CLASSES - 1}]")
        if self.magnification not in MAGNIFICATIONS:
            raise ManifestError(f"{self.id}: unknown magnification {self.magnification!r}")
        if self.split not in SPLITS:
            raise ManifestError(f"{self.id}: unknown split {self.split!r}")


@dataclass
class Manifest:
    records: list[TileRecord]
    class_names: list[str] = field(default_factory=lambda: list(CLASS_NAMES))
    tile_size: int = 300

    def __post_init__(self) -> None:
        self.validate()

    def __len__(self) -> int:
        return len(self.records)

    def validate(self) -> None:
        if len(self.class_names) != NUM_CLASSES:
            raise ManifestError(f"expected {NUM_CLASSES} class names, got {len(self.class_names)}")
        seen: dict[str, TileRecord] = {}
        for rec in self.records:
            rec.validate()
            if rec.id in seen:
                raise ManifestError(f"duplicate id {rec.id!r}")
            seen[rec.id] = rec
        for rec in self.records:
            if rec.paired_clean_id is None:
                continue
            partner = seen.get(rec.paired_clean_id)
            if partner is None:
                raise ManifestError(f"{rec.id}: dangling paired_clean_id {rec.paired_clean_id!r}")
            if partner.domain != DOMAIN_B or partner.source_id != rec.source_id:
                raise ManifestError(
                    f"{rec.id}: paired_clean_id must reference a clean tile with the same source_id"
                )

    def by_id(self) -> dict[str, TileRecord]:
        return {r.id: r for r in self.records}

    def subset(self, split: str | None = None, domain: str | None = None) -> "Manifest":
        recs = [
            r
            for r in self.records
            if (split is None or r.split == split) and (domain is None or r.domain == domain)
        ]
        # partners must stay resolvable, so pull them in when filtering by split only
        if domain is None:
            ids = {r.id for r in recs}
            lookup = self.by_id()
            extra = [
                lookup[r.paired_clean_id]
                for r in recs
                if r.paired_clean_id and r.paired_clean_id not in ids
            ]
            recs = recs + list({r.id: r for r in extra}.values())
        else:
            recs = [replace(r, paired_clean_id=None) for r in recs]
        return Manifest(recs, list(self.class_names), self.tile_size)

    def counts(self) -> dict[tuple[str, str], int]:
        out: dict[tuple[str, str], int] = {}
        for r in self.records:
            out[(r.domain, r.split)] = out.get((r.domain, r.split), 0) + 1
        return out


def _record_to_json(rec: TileRecord, root: Path | None) -> str:
    d = asdict(rec)
    path = Path(rec.image_path)
    if root is not None:
        try:
            path = path.resolve().relative_to(root.resolve())
        except ValueError:
            pass
    d["image_path"] = path.as_posix()
    return json.dumps({k: d[k] for k in RECORD_FIELDS})


def save_manifest(m: Manifest, path: str | os.PathLike) -> Path:
    """Write ``m`` as JSON lines; image paths are stored relative to the file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"class_names": list(m.class_names), "tile_size": m.tile_size})]
    lines += [_record_to_json(r, path.parent) for r in m.records]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _parse_record(obj: dict, root: Path, lineno: int) -> TileRecord:
    missing = [k for k in RECORD_FIELDS if k not in obj]
    if missing:
        raise ManifestError(f"line {lineno}: missing fields {missing}")
    unknown = set(obj) - set(RECORD_FIELDS)
    if unknown:
        raise ManifestError(f"line {lineno}: unknown fields {sorted(unknown)}")
    label = obj["label"]
    if label in ("", None):
        label = None
    elif not isinstance(label, int) or isinstance(label, bool):
        raise ManifestError(f"line {lineno}: label must be an integer, got {label!r}")
    paired = obj["paired_clean_id"] or None
    image_path = Path(obj["image_path"])
    if not image_path.is_absolute():
        image_path = root / image_path
    return TileRecord(
        id=str(obj["id"]),
        image_path=image_path,
        domain=obj["domain"],
        label=label,
        magnification=obj["magnification"],
        source_id=str(obj["source_id"]),
        split=obj["split"],
        paired_clean_id=paired,
    )


def load_manifest(path: str | os.PathLike) -> Manifest:
    """Parse a JSON-lines manifest and check every record invariant.

    The optional first line may carry ``class_names``/``tile_size`` instead of
    a record. Image files are stat-checked but not decoded.
    """
    path = Path(path)
    root = path.parent
    records: list[TileRecord] = []
    header: dict = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {lineno}: parse error: {exc.msg}") from None
            if not isinstance(obj, dict):
                raise ManifestError(f"line {lineno}: expected an object")
            if "id" not in obj and not records and not header:
                header = obj
                continue
            rec = _parse_record(obj, root, lineno)
            try:
                rec.validate()
            except ManifestError as exc:
                raise ManifestError(f"line {lineno}: {exc}") from None
            records.append(rec)
    m = Manifest(
        records,
        list(header.get("class_names", CLASS_NAMES)),
        int(header.get("tile_size", 300)),
    )
    for rec in m.records:
        if not rec.image_path.is_file():
            raise ManifestError(f"{rec.id}: image file not found: {rec.image_path}")
    return m


def split_manifest(m: Manifest, train_fraction: float, seed: int) -> Manifest:
    """Assign train/test splits, stratified per (domain, label).

    Records sharing a ``source_id`` move together, so a synthetic artifact
    tile never lands in a different split from its clean partner. Each
    source group is stratified by its first record in (domain, label) order.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    groups: dict[str, list[TileRecord]] = {}
    for rec in m.records:
        groups.setdefault(rec.source_id, []).append(rec)

    def stratum(recs: list[TileRecord]) -> tuple[str, int]:
        keys = sorted((DOMAINS.index(r.domain), -1 if r.label is None else r.label) for r in recs)
        return DOMAINS[keys[0][0]], keys[0][1]

    strata: dict[tuple[str, int], list[str]] = {}
    for sid, recs in groups.items():
        strata.setdefault(stratum(recs), []).append(sid)

    rng = np.random.default_rng(seed)
    assignment: dict[str, str] = {}
    for key in sorted(strata):
        sids = sorted(strata[key])
        if len(sids) < 2:
            dom, lab = key
            name = dom if lab < 0 else f"{dom}/{m.class_names[lab]}"
            raise ManifestError(f"stratum {name} has fewer than 2 source groups")
        order = rng.permutation(len(sids))
        n_train = int(math.floor(train_fraction * len(sids) + 0.5))
        n_train = min(max(n_train, 1), len(sids) - 1)
        for rank, idx in enumerate(order):
            assignment[sids[idx]] = "train" if rank < n_train else "test"

    records = [replace(r, split=assignment[r.source_id]) for r in m.records]
    return Manifest(records, list(m.class_names), m.tile_size)


# --- pixels ---------------------------------------------------------------


def normalize(img: np.ndarray) -> np.ndarray:
    """uint8 [0, 255] -> float32 [-1, 1]."""
    return img.astype(np.float32) / 127.5 - 1.0


def denormalize(img: np.ndarray) -> np.ndarray:
    """float [-1, 1] -> uint8 [0, 255]; exact inverse of :func:`normalize`."""
    return np.clip(np.rint((np.asarray(img, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def read_image(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def write_image(path: str | os.PathLike, img: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = img if img.dtype == np.uint8 else denormalize(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path, format="PNG")


# --- transforms -------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    flip_h_prob: float = 0.5
    flip_v_prob: float = 0.5
    crop_size: int = 256
    out_size: int = 128

    def __post_init__(self) -> None:
        if self.out_size > self.crop_size:
            raise ValueError(f"out_size {self.out_size} exceeds crop_size {self.crop_size}")
        for p in (self.flip_h_prob, self.flip_v_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"flip probability {p} outside [0, 1]")

    @classmethod
    def for_tile_size(cls, tile_size: int) -> "AugmentConfig":
        """Default recipe for tiles of at least 256 px; flips only for smaller tiles."""
        if tile_size >= cls.crop_size:
            return cls()
        return cls(crop_size=tile_size, out_size=tile_size)

    def check_tile(self, tile_size: int) -> None:
        if self.crop_size > tile_size:
            raise ValueError(f"crop_size {self.crop_size} exceeds tile_size {tile_size}")


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of an H x W x C array, half-pixel centres (no corner alignment)."""
    if img.shape[0] == size and img.shape[1] == size:
        return np.ascontiguousarray(img, dtype=np.float32)
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False, antialias=False)
    return out[0].permute(1, 2, 0).numpy()


def _check_size(img: np.ndarray, crop: int) -> None:
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {img.shape}")
    if img.shape[0] < crop or img.shape[1] < crop:
        raise ValueError(f"image {img.shape[:2]} smaller than crop_size {crop}")


def augment(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Random flips, a uniformly placed crop and a bilinear resize."""
    _check_size(image, cfg.crop_size)
    return _augment_many([image], cfg, rng)[0]


def _augment_many(
    images: Sequence[np.ndarray], cfg: AugmentConfig, rng: np.random.Generator
) -> list[np.ndarray]:
    # one draw, applied identically to every image (keeps synthetic pairs aligned)
    h, w = images[0].shape[:2]
    flip_h = rng.random() < cfg.flip_h_prob
    flip_v = rng.random() < cfg.flip_v_prob
    top = int(rng.integers(0, h - cfg.crop_size + 1))
    left = int(rng.integers(0, w - cfg.crop_size + 1))
    out = []
    for img in images:
        if flip_h:
            img = img[:, ::-1]
        if flip_v:
            img = img[::-1]
        img = img[top : top + cfg.crop_size, left : left + cfg.crop_size]
        out.append(resize_bilinear(img, cfg.out_size))
    return out


def center_crop_offset(h: int, w: int, crop: int) -> tuple[int, int]:
    return (h - crop) // 2, (w - crop) // 2


def eval_transform(image: np.ndarray, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Deterministic centre crop to ``crop_size`` then resize to ``out_size``."""
    _check_size(image, cfg.crop_size)
    top, left = center_crop_offset(image.shape[0], image.shape[1], cfg.crop_size)
    img = image[top : top + cfg.crop_size, left : left + cfg.crop_size]
    return resize_bilinear(img, cfg.out_size)


# --- batching ---------------------------------------------------------------


@dataclass
class Batch:
    images_a: torch.Tensor  # B x 3 x H x W
    labels_a: torch.Tensor  # B, int64
    images_b: torch.Tensor
    clean_targets_a: torch.Tensor | None = None
    ids_a: list[str] = field(default_factory=list)
    ids_b: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.images_a.shape[0]


class TileCache:
    """Decodes each tile once and keeps the normalized array in memory."""

    def __init__(self, tile_size: int | None = None):
        self.tile_size = tile_size
        self._cache: dict[Path, np.ndarray] = {}

    def get(self, path: Path) -> np.ndarray:
        path = Path(path)
        img = self._cache.get(path)
        if img is None:
            raw = read_image(path)
            if self.tile_size is not None and raw.shape[:2] != (self.tile_size, self.tile_size):
                raise ManifestError(
                    f"{path}: expected {self.tile_size}x{self.tile_size} tile, got {raw.shape[:2]}"
                )
            img = normalize(raw)
            self._cache[path] = img
        return img


def _to_tensor(images: list[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).contiguous()


def _epoch_order(n: int, length: int, rng: np.random.Generator) -> np.ndarray:
    # the smaller domain cycles, reshuffled on every pass
    chunks = []
    while sum(len(c) for c in chunks) < length:
        chunks.append(rng.permutation(n))
    return np.concatenate(chunks)[:length]


class UnpairedBatches:
    """Unpaired A/B batches for one manifest.

    A batch is a pure function of ``(seed, epoch, step)``, so the output is
    the same whatever ``workers`` is set to.
    """

    def __init__(
        self,
        manifest: Manifest,
        batch_size: int,
        cfg: AugmentConfig,
        seed: int,
        workers: int = 0,
        cache: TileCache | None = None,
    ):
        self.a = [r for r in manifest.records if r.domain == DOMAIN_A]
        self.b = [r for r in manifest.records if r.domain == DOMAIN_B]
        if not self.a or not self.b:
            raise ValueError("both domains must be nonempty to build unpaired batches")
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        cfg.check_tile(manifest.tile_size)
        self.lookup = manifest.by_id()
        self.batch_size = batch_size
        self.cfg = cfg
        self.seed = seed
        self.workers = workers
        self.cache = cache or TileCache(manifest.tile_size)
        self.n = max(len(self.a), len(self.b))

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(self.n / self.batch_size)

    def _orders(self, epoch: int) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng([self.seed, epoch, 0])
        order_a = _epoch_order(len(self.a), self.n, rng)
        order_b = _epoch_order(len(self.b), self.n, rng)
        return order_a, order_b

    def _build(self, epoch: int, step: int, idx_a: np.ndarray, idx_b: np.ndarray) -> Batch:
        imgs_a, imgs_b, targets, labels = [], [], [], []
        paired = all(self.a[i].paired_clean_id for i in idx_a)
        for k, i in enumerate(idx_a):
            rec = self.a[i]
            rng = np.random.default_rng([self.seed, epoch, 1, step, k])
            srcs = [self.cache.get(rec.image_path)]
            if paired:
                srcs.append(self.cache.get(self.lookup[rec.paired_clean_id].image_path))
            out = _augment_many(srcs, self.cfg, rng)
            imgs_a.append(out[0])
            if paired:
                targets.append(out[1])
            labels.append(rec.label)
        for k, i in enumerate(idx_b):
            rng = np.random.default_rng([self.seed, epoch, 2, step, k])
            imgs_b.append(_augment_many([self.cache.get(self.b[i].image_path)], self.cfg, rng)[0])
        return Batch(
            images_a=_to_tensor(imgs_a),
            labels_a=torch.tensor(labels, dtype=torch.int64),
            images_b=_to_tensor(imgs_b),
            clean_targets_a=_to_tensor(targets) if paired else None,
            ids_a=[self.a[i].id for i in idx_a],
            ids_b=[self.b[i].id for i in idx_b],
        )

    def epoch(self, epoch: int) -> Iterator[Batch]:
        order_a, order_b = self._orders(epoch)
        slices = [
            (epoch, s, order_a[s * self.batch_size : (s + 1) * self.batch_size],
             order_b[s * self.batch_size : (s + 1) * self.batch_size])
            for s in range(self.steps_per_epoch)
        ]
        if self.workers <= 1:
            for args in slices:
                yield self._build(*args)
            return
        # warm the cache serially; the dict is not written to concurrently afterwards
        for rec in self.a + self.b:
            self.cache.get(rec.image_path)
            if rec.paired_clean_id:
                self.cache.get(self.lookup[rec.paired_clean_id].image_path)
        with ThreadPoolExecutor(self.workers) as pool:
            yield from pool.map(lambda args: self._build(*args), slices)


def make_batches(
    train: Manifest,
    batch_size: int,
    cfg: AugmentConfig,
    seed: int,
    epoch: int = 0,
    workers: int = 0,
) -> Iterator[Batch]:
    """Yield one epoch of unpaired batches from ``train``."""
    return UnpairedBatches(train, batch_size, cfg, seed, workers=workers).epoch(epoch)
