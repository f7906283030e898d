"""Minmax training for the six CycleGAN variants.

Variants:

* ``base``   -- UNet generators, plain cycles.
* ``dpa``    -- as ``base`` with attention-UNet generators.
* ``cond``   -- G_BA and D_A also see a one-hot artifact-class map.
* ``no_aba`` -- ``base`` with the A->B->A cycle weight forced to 0.
* ``attn``   -- the A->B->A cycle feeds G_BA an attention channel computed
  from G_AB's penultimate features; elsewhere that channel is Gaussian noise.
* ``ws``     -- ``attn`` plus an auxiliary classifier on ``a * mask`` and
  smoothness/sparsity penalties on the mask.
"""

from __future__ import annotations

import base64
import csv
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import checkpoint as ckpt
from .data import NUM_CLASSES, AugmentConfig, Batch, Manifest, UnpairedBatches
from .losses import (
    LossReport,
    LossWeights,
    classification_loss,
    compose_base,
    compose_ws,
    cycle_loss,
    identity_loss,
    lsgan_discriminator_loss,
    lsgan_generator_loss,
    smoothness_loss,
    sparsity_loss,
)
from .networks import (
    ArtifactClassifier,
    AttentionHead,
    DiscriminatorSpec,
    GeneratorSpec,
    PatchDiscriminator,
    UNetGenerator,
    classify,
    encode_conditions,
)

log = logging.getLogger(__name__)

VARIANTS = ("base", "dpa", "cond", "no_aba", "attn", "ws")
ATTENTION_VARIANTS = ("attn", "ws")
METRIC_FIELDS = ["epoch", "step", "lr", *LossReport.names(), "wall_clock"]

# config fields that may differ between a checkpoint and the run resuming it
_RESUMABLE_FIELDS = {"epochs", "workers"}


class NonFiniteLoss(FloatingPointError):
    pass


class ConfigMismatch(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "base"
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    lr_decay: float = 0.9975
    epochs: int = 30
    batch_size: int = 16
    weight_decay: float = 1e-5
    real_label: float = 0.9
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    arch: str | None = None
    base_width: int = 32
    depth: int = 4
    disc_widths: tuple[int, ...] = (64, 128, 256, 512)
    pool_size: int = 0
    deterministic: bool = True
    workers: int = 0

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.variant == "no_aba" and self.weights.aba != 0:
            object.__setattr__(self, "weights", replace(self.weights, aba=0.0))
        if self.arch is None:
            object.__setattr__(self, "arch", "attention_unet" if self.variant == "dpa" else "unet")
        object.__setattr__(self, "disc_widths", tuple(self.disc_widths))
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not 0.0 < self.real_label <= 1.0:
            raise ValueError("real_label must lie in (0, 1]")

    @property
    def g_ba_channels(self) -> int:
        if self.variant in ATTENTION_VARIANTS:
            return 4
        if self.variant == "cond":
            return 3 + NUM_CLASSES
        return 3

    @property
    def needs_labels(self) -> bool:
        return self.variant in ("cond", "ws")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["disc_widths"] = list(self.disc_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d["weights"])
        d["augment"] = AugmentConfig(**d["augment"])
        d["disc_widths"] = tuple(d["disc_widths"])
        return cls(**d)


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate for the 0-based ``epoch``: ``lr * decay**epoch``."""
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    return cfg.lr * cfg.lr_decay**epoch


class CycleGAN(nn.Module):
    """All networks of one variant. The RGB projector is ``g_ab.to_rgb``."""

    def __init__(self, cfg: TrainConfig):
        super().__init__()
        self.variant = cfg.variant
        self.g_ab = UNetGenerator(GeneratorSpec(cfg.arch, 3, cfg.base_width, cfg.depth))
        self.g_ba = UNetGenerator(GeneratorSpec(cfg.arch, cfg.g_ba_channels, cfg.base_width, cfg.depth))
        d_a_in = 3 + NUM_CLASSES if cfg.variant == "cond" else 3
        self.d_a = PatchDiscriminator(DiscriminatorSpec(d_a_in, cfg.disc_widths))
        self.d_b = PatchDiscriminator(DiscriminatorSpec(3, cfg.disc_widths))
        self.attention = AttentionHead(self.g_ab.features) if cfg.variant in ATTENTION_VARIANTS else None
        self.classifier = ArtifactClassifier() if cfg.variant == "ws" else None

    @property
    def proj_rgb(self):
        return self.g_ab.to_rgb

    def generators(self) -> list[nn.Module]:
        return [m for m in (self.g_ab, self.g_ba, self.attention, self.classifier) if m is not None]

    def discriminators(self) -> list[nn.Module]:
        return [self.d_a, self.d_b]

    def specs(self) -> dict:
        out = {
            "g_ab": self.g_ab.spec.to_dict(),
            "g_ba": self.g_ba.spec.to_dict(),
            "d_a": self.d_a.spec.to_dict(),
            "d_b": self.d_b.spec.to_dict(),
        }
        if self.attention is not None:
            out["attention"] = {"features": self.attention.features}
            out["proj_rgb"] = {"features": self.proj_rgb.features}
        if self.classifier is not None:
            out["classifier"] = {"n_classes": NUM_CLASSES}
        return out

    @torch.no_grad()
    def clean(self, a: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor | None]:
        """Artifact -> clean translation, plus the attention mask when the variant has one."""
        out = self.g_ab(a)
        mask = self.attention(out.penultimate) if self.attention is not None else None
        return out.image, mask


class ImagePool:
    """History buffer of generated images for discriminator updates (off when size is 0)."""

    def __init__(self, size: int):
        self.size = size
        self.images: list[torch.Tensor] = []

    def query(self, images: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
        if self.size == 0:
            return images
        out = []
        for img in images:
            img = img[None]
            if len(self.images) < self.size:
                self.images.append(img.clone())
                out.append(img)
            elif torch.rand((), generator=gen) < 0.5:
                j = int(torch.randint(0, self.size, (), generator=gen))
                out.append(self.images[j].clone())
                self.images[j] = img.clone()
            else:
                out.append(img)
        return torch.cat(out)


@dataclass
class TrainState:
    cfg: TrainConfig
    model: CycleGAN
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    gen: torch.Generator
    epoch: int = 0  # completed epochs
    step: int = 0  # completed steps
    pool_a: ImagePool | None = None
    pool_b: ImagePool | None = None


@dataclass
class StepMetrics:
    report: LossReport
    lr: float
    epoch: int
    step: int
    wall_clock: float

    def row(self) -> dict:
        return {"epoch": self.epoch, "step": self.step, "lr": self.lr, **self.report.as_dict(),
                "wall_clock": self.wall_clock}


def _adamw(modules: list[nn.Module], cfg: TrainConfig) -> torch.optim.Optimizer:
    params = [p for m in modules for p in m.parameters()]
    return torch.optim.AdamW(
        params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay,
        foreach=False,
    )


def init_state(cfg: TrainConfig) -> TrainState:
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(cfg.seed)
    model = CycleGAN(cfg)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    return TrainState(
        cfg, model, _adamw(model.generators(), cfg), _adamw(model.discriminators(), cfg), gen,
        pool_a=ImagePool(cfg.pool_size), pool_b=ImagePool(cfg.pool_size),
    )


def _set_requires_grad(modules: list[nn.Module], flag: bool) -> None:
    for m in modules:
        for p in m.parameters():
            p.requires_grad_(flag)


def _noise(like: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    b, _, h, w = like.shape
    return torch.randn(b, 1, h, w, generator=gen, dtype=like.dtype)


def _check_finite(components: dict[str, torch.Tensor], where: str) -> None:
    for name, v in components.items():
        if not torch.isfinite(v).all():
            raise NonFiniteLoss(f"non-finite loss component {name!r} ({float(v.detach())}) at {where}")


def generator_losses(
    model: CycleGAN, cfg: TrainConfig, a: torch.Tensor, b: torch.Tensor, labels: torch.Tensor,
    gen: torch.Generator,
) -> tuple[dict[str, torch.Tensor], dict[str, torch.Tensor]]:
    """Forward all generator-side paths of one batch.

    Returns the loss components and the intermediate tensors (fakes, masks,
    sampled labels, network inputs) the discriminator update and the tests
    consume.
    """
    v = cfg.variant
    h, w = a.shape[2:]
    extras: dict[str, torch.Tensor] = {}

    out_ab = model.g_ab(a)
    fake_b = out_ab.image
    if v in ATTENTION_VARIANTS:
        mask = model.attention(out_ab.penultimate)
        extras["mask"] = mask
        g_ba_cycle_in = torch.cat([fake_b, mask], 1)
        g_ba_b_in = torch.cat([b, _noise(b, gen)], 1)
        g_ba_id_in = torch.cat([a, _noise(a, gen)], 1)
    elif v == "cond":
        true_cond = encode_conditions(labels, h, w)
        sampled = torch.randint(0, NUM_CLASSES, (b.shape[0],), generator=gen)
        extras["sampled_labels"] = sampled
        extras["true_cond"] = true_cond
        extras["sampled_cond"] = encode_conditions(sampled, h, w)
        g_ba_cycle_in = torch.cat([fake_b, true_cond], 1)
        g_ba_b_in = torch.cat([b, extras["sampled_cond"]], 1)
        g_ba_id_in = torch.cat([a, true_cond], 1)
    else:
        g_ba_cycle_in, g_ba_b_in, g_ba_id_in = fake_b, b, a
    extras["g_ba_cycle_in"] = g_ba_cycle_in

    rec_a = model.g_ba(g_ba_cycle_in).image
    fake_a = model.g_ba(g_ba_b_in).image
    rec_b = model.g_ab(fake_a).image
    same_a = model.g_ba(g_ba_id_in).image
    same_b = model.g_ab(b).image

    d_a_fake_in = torch.cat([fake_a, extras["sampled_cond"]], 1) if v == "cond" else fake_a
    score_fake_b = model.d_b(fake_b)
    extras.update(fake_a=fake_a, fake_b=fake_b, d_a_fake_in=d_a_fake_in, score_fake_b=score_fake_b)

    comps = {
        "g_adv_ab": lsgan_generator_loss(score_fake_b),
        "g_adv_ba": lsgan_generator_loss(model.d_a(d_a_fake_in)),
        "cyc_aba": cycle_loss(rec_a, a),
        "cyc_bab": cycle_loss(rec_b, b),
        "id_a": identity_loss(same_a, a),
        "id_b": identity_loss(same_b, b),
    }
    if v == "ws":
        mask = extras["mask"]
        comps["cls"] = classification_loss(classify(model.classifier, a, mask), labels)
        comps["smooth"] = smoothness_loss(mask)
        comps["sparse"] = sparsity_loss(mask)
    return comps, extras


def train_step(state: TrainState, batch: Batch, cfg: TrainConfig | None = None) -> StepMetrics:
    """One generator update followed by one discriminator update."""
    cfg = cfg or state.cfg
    model = state.model
    if cfg.needs_labels and (batch.labels_a is None or len(batch.labels_a) != len(batch.images_a)):
        raise ValueError(f"variant {cfg.variant!r} requires a label for every domain-A image")
    if cfg.needs_labels and (batch.labels_a < 0).any():
        raise ValueError(f"variant {cfg.variant!r} requires labeled domain-A images")
    t0 = time.perf_counter()
    where = f"epoch {state.epoch + 1} step {state.step + 1}"
    a, b, labels = batch.images_a, batch.images_b, batch.labels_a
    model.train()

    # generator side, discriminators frozen
    _set_requires_grad(model.discriminators(), False)
    comps, extras = generator_losses(model, cfg, a, b, labels, state.gen)
    zero = torch.zeros(())
    full = {**comps, "d_a": zero, "d_b": zero}
    if cfg.variant == "ws":
        total_g, _ = compose_ws(full, cfg.weights)
    else:
        total_g, _ = compose_base(full, cfg.weights)
    _check_finite({**comps, "total_g": total_g}, where)
    state.opt_g.zero_grad(set_to_none=True)
    total_g.backward()
    state.opt_g.step()
    _set_requires_grad(model.discriminators(), True)

    # discriminator side, generators untouched
    fake_b = state.pool_b.query(extras["fake_b"].detach(), state.gen)
    fake_a_in = state.pool_a.query(extras["d_a_fake_in"].detach(), state.gen)
    real_a_in = torch.cat([a, extras["true_cond"]], 1) if cfg.variant == "cond" else a
    d_a = lsgan_discriminator_loss(model.d_a(real_a_in), model.d_a(fake_a_in), cfg.real_label)
    d_b = lsgan_discriminator_loss(model.d_b(b), model.d_b(fake_b), cfg.real_label)
    total_d = d_a + d_b
    _check_finite({"d_a": d_a, "d_b": d_b}, where)
    state.opt_d.zero_grad(set_to_none=True)
    total_d.backward()
    state.opt_d.step()

    state.step += 1
    vals = {k: float(v.detach()) for k, v in comps.items()}
    report = LossReport(**vals, d_a=float(d_a.detach()), d_b=float(d_b.detach()),
                        total_g=float(total_g.detach()), total_d=float(total_d.detach()))
    wall = 0.0 if cfg.deterministic else time.perf_counter() - t0
    return StepMetrics(report, state.opt_g.param_groups[0]["lr"], state.epoch + 1, state.step, wall)


# --- checkpointing -----------------------------------------------------------


def _optimizer_arrays(prefix: str, opt: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    out = {}
    params = [p for g in opt.param_groups for p in g["params"]]
    for i, p in enumerate(params):
        st = opt.state.get(p)
        if not st:
            continue
        out[f"{prefix}.{i}.step"] = np.asarray(float(st["step"]), dtype=np.float32)
        out[f"{prefix}.{i}.exp_avg"] = st["exp_avg"].detach().numpy()
        out[f"{prefix}.{i}.exp_avg_sq"] = st["exp_avg_sq"].detach().numpy()
    return out


def _load_optimizer(prefix: str, opt: torch.optim.Optimizer, arrays: dict[str, np.ndarray]) -> None:
    params = [p for g in opt.param_groups for p in g["params"]]
    for i, p in enumerate(params):
        key = f"{prefix}.{i}"
        if f"{key}.step" not in arrays:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(arrays[f"{key}.step"]), dtype=torch.float32),
            "exp_avg": torch.from_numpy(arrays[f"{key}.exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(arrays[f"{key}.exp_avg_sq"].copy()),
        }


def save_state(state: TrainState, path: str | os.PathLike) -> Path:
    arrays = {f"model.{k}": v.detach().numpy() for k, v in state.model.state_dict().items()}
    arrays.update(_optimizer_arrays("opt_g", state.opt_g))
    arrays.update(_optimizer_arrays("opt_d", state.opt_d))
    meta = {
        "config": state.cfg.to_dict(),
        "specs": state.model.specs(),
        "epoch": state.epoch,
        "step": state.step,
        "rng": base64.b64encode(state.gen.get_state().numpy().tobytes()).decode(),
        "pool_size": state.cfg.pool_size,
    }
    return ckpt.save(path, ckpt.CheckpointData(meta, arrays))


def load_state(path: str | os.PathLike, cfg: TrainConfig | None = None) -> TrainState:
    """Rebuild a :class:`TrainState` from a checkpoint.

    When ``cfg`` is given it must agree with the stored config on everything
    but the epoch budget and worker count.
    """
    data = ckpt.load(path)
    stored = TrainConfig.from_dict(data.meta["config"])
    if cfg is not None:
        a, b = stored.to_dict(), cfg.to_dict()
        diff = sorted(k for k in a if k not in _RESUMABLE_FIELDS and a[k] != b[k])
        if diff:
            raise ConfigMismatch(f"checkpoint config differs in {diff} (checkpoint variant {stored.variant!r})")
        stored = replace(stored, epochs=cfg.epochs, workers=cfg.workers)
    state = init_state(stored)
    sd = {k[len("model."):]: torch.from_numpy(v.copy()) for k, v in data.arrays.items() if k.startswith("model.")}
    state.model.load_state_dict(sd, strict=True)
    _load_optimizer("opt_g", state.opt_g, data.arrays)
    _load_optimizer("opt_d", state.opt_d, data.arrays)
    rng = np.frombuffer(base64.b64decode(data.meta["rng"]), dtype=np.uint8).copy()
    state.gen.set_state(torch.from_numpy(rng))
    state.epoch = int(data.meta["epoch"])
    state.step = int(data.meta["step"])
    return state


# --- runs --------------------------------------------------------------------


def _checkpoint_name(epoch: int) -> str:
    return f"ckpt_epoch_{epoch}.bin"


def _truncate_metrics(path: Path, keep_epochs: int) -> None:
    if not path.exists():
        return
    with open(path, newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if int(r["epoch"]) <= keep_epochs]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, METRIC_FIELDS)
        writer.writeheader()
        writer.writerows(rows)


def _format_row(row: dict) -> dict:
    return {k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()}


def _train_loop(state: TrainState, manifest: Manifest, out_dir: Path) -> TrainState:
    cfg = state.cfg
    train = manifest.subset(split="train")
    batches = UnpairedBatches(train, cfg.batch_size, cfg.augment, cfg.seed, workers=cfg.workers)
    metrics_path = out_dir / "metrics.csv"
    new_file = not metrics_path.exists()
    with open(metrics_path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, METRIC_FIELDS)
        if new_file:
            writer.writeheader()
        for epoch in range(state.epoch, cfg.epochs):
            lr = lr_schedule(cfg, epoch)
            for opt in (state.opt_g, state.opt_d):
                for group in opt.param_groups:
                    group["lr"] = lr
            for batch in batches.epoch(epoch):
                m = train_step(state, batch, cfg)
                writer.writerow(_format_row(m.row()))
                fh.flush()
            state.epoch = epoch + 1
            name = _checkpoint_name(state.epoch)
            save_state(state, out_dir / name)
            ckpt.write_latest(out_dir, name)
            log.info("epoch %d/%d done (%d steps), lr=%.6g", state.epoch, cfg.epochs, state.step, lr)
    return state


def run_training(cfg: TrainConfig, train_manifest: Manifest, out_dir: str | os.PathLike) -> TrainState:
    """Train ``cfg.epochs`` epochs on the manifest's train split.

    Writes ``ckpt_epoch_0.bin`` (initial weights), one checkpoint per
    completed epoch, a ``latest`` marker and an append-only ``metrics.csv``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.needs_labels and any(
        r.label is None for r in train_manifest.records if r.domain == "A_artifact"
    ):
        raise ValueError(f"variant {cfg.variant!r} requires labeled domain-A data")
    cfg.augment.check_tile(train_manifest.tile_size)
    if cfg.augment.out_size % 2**cfg.depth:
        raise ValueError(f"out_size {cfg.augment.out_size} not divisible by 2**depth")
    metrics_path = out / "metrics.csv"
    if metrics_path.exists():
        metrics_path.unlink()
    state = init_state(cfg)
    save_state(state, out / _checkpoint_name(0))
    ckpt.write_latest(out, _checkpoint_name(0))
    return _train_loop(state, train_manifest, out)


def resume(
    checkpoint_path: str | os.PathLike,
    train_manifest: Manifest,
    cfg: TrainConfig | None = None,
    out_dir: str | os.PathLike | None = None,
) -> TrainState:
    """Continue a run from a checkpoint; metric rows logged after it are discarded."""
    path = ckpt.resolve(checkpoint_path)
    state = load_state(path, cfg)
    out = Path(out_dir) if out_dir is not None else path.parent
    out.mkdir(parents=True, exist_ok=True)
    _truncate_metrics(out / "metrics.csv", state.epoch)
    return _train_loop(state, train_manifest, out)


def load_model(checkpoint_path: str | os.PathLike) -> tuple[CycleGAN, TrainConfig]:
    state = load_state(checkpoint_path)
    state.model.eval()
    return state.model, state.cfg


def read_metrics(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]


def epoch_means(rows: list[dict], key: str = "total_g") -> dict[int, float]:
    by: dict[int, list[float]] = {}
    for r in rows:
        by.setdefault(int(r["epoch"]), []).append(r[key])
    return {e: float(np.mean(v)) for e, v in sorted(by.items())}
