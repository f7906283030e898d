"""Procedural paired-artifact corpus.

Each scene is one clean H&E-like texture. Every requested artifact class is
composited onto that same texture, so each artifact tile has an exact clean
ground truth and a pixel mask of where the corruption was drawn.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import (
    CLASS_NAMES,
    DOMAIN_A,
    DOMAIN_B,
    NUM_CLASSES,
    Manifest,
    TileRecord,
    save_manifest,
    split_manifest,
    write_image,
)


@dataclass(frozen=True)
class ClassParams:
    opacity: tuple[float, float] = (0.55, 0.85)  # pen / ink blob alpha
    blur_sigma: tuple[float, float] = (1.5, 3.0)  # out-of-focus sigma, px at 64 px scale
    stroke_width: tuple[float, float] = (0.08, 0.16)  # pen stroke / fold band, fraction of tile


@dataclass(frozen=True)
class SyntheticSpec:
    n_scenes: int
    classes: tuple[int, ...] = tuple(range(NUM_CLASSES))
    tile_size: int = 300
    seed: int = 0
    params: ClassParams = field(default_factory=ClassParams)
    train_fraction: float | None = 0.8
    magnification: str = "x40"

    def __post_init__(self) -> None:
        if self.n_scenes < 1:
            raise ValueError("n_scenes must be at least 1")
        if not self.classes:
            raise ValueError("classes must be nonempty")
        for c in self.classes:
            if not 0 <= int(c) < NUM_CLASSES:
                raise ValueError(f"unknown class index {c}")
        if self.tile_size < 16:
            raise ValueError("tile_size must be at least 16")


def _smooth_noise(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    n = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    n -= n.min()
    return n / max(n.max(), 1e-12)


def render_clean(rng: np.random.Generator, size: int) -> np.ndarray:
    """One clean tissue-like tile, uint8 H x W x 3."""
    s = size / 64.0
    stroma = np.array([236.0, 176.0, 205.0]) + rng.uniform(-12, 12, 3)
    nucleus = np.array([92.0, 58.0, 140.0]) + rng.uniform(-15, 15, 3)
    background = np.array([244.0, 238.0, 242.0])

    density = _smooth_noise(rng, size, 6 * s)
    img = stroma[None, None] * (0.85 + 0.3 * density[..., None])
    gaps = _smooth_noise(rng, size, 8 * s) > rng.uniform(0.72, 0.85)
    img[gaps] = background

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    nuclei = np.zeros((size, size))
    n_nuclei = int(rng.integers(18, 32))
    for _ in range(n_nuclei):
        cy, cx = rng.uniform(0, size, 2)
        ry, rx = rng.uniform(1.2, 2.6, 2) * s
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = (dx * np.cos(theta) + dy * np.sin(theta)) / rx
        v = (-dx * np.sin(theta) + dy * np.cos(theta)) / ry
        nuclei = np.maximum(nuclei, (u * u + v * v) <= 1.0)
    nuclei = ndimage.gaussian_filter(nuclei, 0.6 * s) * ~gaps
    img = img * (1 - nuclei[..., None]) + nucleus[None, None] * nuclei[..., None]
    img += rng.normal(0, 3.0, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _curve_mask(rng: np.random.Generator, size: int, width: float, n_pts: int = 400) -> np.ndarray:
    # smooth random curve crossing the tile, thickened by a distance transform
    p0 = rng.uniform(0, size, 2)
    angle = rng.uniform(0, 2 * np.pi)
    turn = np.cumsum(rng.normal(0, 0.05, n_pts))
    steps = np.stack([np.sin(angle + turn), np.cos(angle + turn)], 1) * (1.6 * size / n_pts)
    pts = p0 + np.cumsum(steps, 0) - steps.sum(0) / 2
    grid = np.zeros((size, size), dtype=bool)
    ij = np.rint(pts).astype(int)
    ok = (ij >= 0).all(1) & (ij < size).all(1)
    grid[ij[ok, 0], ij[ok, 1]] = True
    if not grid.any():
        grid[size // 2, :] = True
    return ndimage.distance_transform_edt(~grid) <= width / 2


def _blob_mask(rng: np.random.Generator, size: int, coverage: float) -> np.ndarray:
    noise = _smooth_noise(rng, size, size / 10)
    return noise >= np.quantile(noise, 1 - coverage)


def _composite(clean: np.ndarray, alpha: np.ndarray, layer: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    out = clean.astype(np.float64) * (1 - alpha[..., None]) + layer * alpha[..., None]
    out = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    mask = alpha > 0
    return np.where(mask[..., None], out, clean), mask


def render_artifact(
    clean: np.ndarray, label: int, rng: np.random.Generator, params: ClassParams = ClassParams()
) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt ``clean`` with artifact class ``label``.

    Returns the artifact tile and the boolean mask of pixels the corruption
    may touch; outside the mask the tile equals ``clean`` exactly.
    """
    if not 0 <= label < NUM_CLASSES:
        raise ValueError(f"unknown class index {label}")
    size = clean.shape[0]
    s = size / 64.0
    name = CLASS_NAMES[label]

    if name == "pen_marker":
        width = rng.uniform(*params.stroke_width) * size
        shape = _curve_mask(rng, size, width) | _curve_mask(rng, size, width)
        alpha = ndimage.gaussian_filter(shape.astype(float), 0.5 * s) * rng.uniform(*params.opacity)
        alpha[alpha < 0.02] = 0
        color = np.array([40.0, 150.0, 90.0]) + rng.uniform(-20, 20, 3)
        return _composite(clean, alpha, color)

    if name == "ink":
        shape = _blob_mask(rng, size, rng.uniform(0.15, 0.3))
        alpha = np.where(shape, rng.uniform(max(params.opacity[1], 0.85), 1.0), 0.0)
        color = np.array([25.0, 30.0, 70.0]) + rng.uniform(-10, 10, 3)
        return _composite(clean, alpha, color)

    if name == "blur":
        sigma = rng.uniform(*params.blur_sigma) * s
        blurred = ndimage.gaussian_filter(clean.astype(np.float64), (sigma, sigma, 0), mode="reflect")
        out = np.clip(np.rint(blurred), 0, 255).astype(np.uint8)
        return out, np.ones((size, size), dtype=bool)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    if name == "air_bubble":
        layer = np.zeros(clean.shape)
        alpha = np.zeros((size, size))
        for _ in range(int(rng.integers(1, 3))):
            cy, cx = rng.uniform(0.2, 0.8, 2) * size
            r = rng.uniform(0.15, 0.3) * size
            d = np.hypot(yy - cy, xx - cx) / r
            ring = np.exp(-((d - 1.0) ** 2) / 0.01)
            inner = (d < 1.0) * 0.35
            a = np.clip(ring * 0.9 + inner, 0, 0.95)
            a[d > 1.3] = 0
            shade = np.where(d < 0.95, 250.0, 60.0)
            upd = a > alpha
            alpha[upd] = a[upd]
            layer[upd] = shade[upd, None]
        alpha[alpha < 0.02] = 0
        return _composite(clean, alpha, layer)

    if name == "tissue_fold":
        theta = rng.uniform(0, np.pi)
        offset = rng.uniform(-0.2, 0.2) * size
        nx, ny = np.cos(theta), np.sin(theta)
        dist = (xx - size / 2) * nx + (yy - size / 2) * ny - offset
        half = rng.uniform(*params.stroke_width) * size
        band = np.abs(dist) < half
        # ridge: pull pixels across the band centre, then darken the double layer
        shift = half * np.sign(dist) * (1 - np.abs(dist) / half)
        src_y = np.clip(yy + shift * ny, 0, size - 1)
        src_x = np.clip(xx + shift * nx, 0, size - 1)
        warped = np.stack(
            [ndimage.map_coordinates(clean[..., c].astype(float), [src_y, src_x], order=1) for c in range(3)],
            -1,
        )
        folded = warped * np.array([0.62, 0.5, 0.7])
        alpha = np.where(band, 1.0, 0.0)
        return _composite(clean, alpha, folded)

    if name == "dust":
        n = int(rng.integers(25, 50))
        cy, cx = rng.uniform(0, size, (2, n))
        rad = rng.uniform(0.5, 1.6, n) * s
        alpha = np.zeros((size, size))
        for y, x, r in zip(cy, cx, rad):
            alpha = np.maximum(alpha, np.clip(1.2 - np.hypot(yy - y, xx - x) / r, 0, 1))
        alpha[alpha < 0.05] = 0
        return _composite(clean, alpha * 0.9, np.array([45.0, 40.0, 35.0]))

    # filament
    shape = np.zeros((size, size), dtype=bool)
    for _ in range(int(rng.integers(2, 4))):
        shape |= _curve_mask(rng, size, max(1.0, 0.6 * s), n_pts=600)
    alpha = np.where(shape, 0.85, 0.0)
    return _composite(clean, alpha, np.array([70.0, 50.0, 40.0]))


def synthesize_corpus(spec: SyntheticSpec, out_dir: str | os.PathLike) -> Manifest:
    """Render ``spec.n_scenes`` scenes into ``out_dir`` and write its manifest.

    Layout: ``clean/<scene>.png``, ``artifact/<scene>_<class>.png``,
    ``masks/<scene>_<class>.png`` and ``manifest.txt``.
    """
    out = Path(out_dir)
    for sub in ("clean", "artifact", "masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"{out} is not writable")

    records: list[TileRecord] = []
    for i in range(spec.n_scenes):
        scene = f"scene{i:05d}"
        rng = np.random.default_rng([spec.seed, i])
        clean = render_clean(rng, spec.tile_size)
        clean_path = out / "clean" / f"{scene}.png"
        write_image(clean_path, clean)
        records.append(
            TileRecord(f"{scene}_clean", clean_path, DOMAIN_B, None, spec.magnification, scene, "train")
        )
        for c in sorted(set(int(c) for c in spec.classes)):
            art, mask = render_artifact(clean, c, np.random.default_rng([spec.seed, i, c + 1]), spec.params)
            art_path = out / "artifact" / f"{scene}_{c}.png"
            write_image(art_path, art)
            write_image(out / "masks" / f"{scene}_{c}.png", mask.astype(np.uint8) * 255)
            records.append(
                TileRecord(
                    f"{scene}_{c}", art_path, DOMAIN_A, c, spec.magnification, scene, "train",
                    paired_clean_id=f"{scene}_clean",
                )
            )

    manifest = Manifest(records, list(CLASS_NAMES), spec.tile_size)
    if spec.train_fraction is not None and spec.n_scenes >= 2:
        manifest = split_manifest(manifest, spec.train_fraction, spec.seed)
    save_manifest(manifest, out / "manifest.txt")
    return manifest


def mask_path_for(record: TileRecord) -> Path | None:
    """Stored corruption mask of a synthetic artifact tile, if present."""
    p = Path(record.image_path)
    if p.parent.name != "artifact":
        return None
    cand = p.parent.parent / "masks" / p.name
    return cand if cand.is_file() else None
