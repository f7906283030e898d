"""Adversarial, reconstruction and weak-supervision objectives.

Every function here is a pure map from tensors to a scalar tensor, so they
work in any floating dtype (the gradient checks run in float64).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Mapping

import torch
import torch.nn.functional as F

from .data import NUM_CLASSES

BASE_TERMS = ("g_adv_ab", "g_adv_ba", "cyc_aba", "cyc_bab", "id_a", "id_b", "d_a", "d_b")
WS_TERMS = ("cls", "smooth", "sparse")


class MissingLossTerm(KeyError):
    pass


@dataclass(frozen=True)
class LossWeights:
    aba: float = 5.0
    bab: float = 5.0
    a: float = 5.0
    b: float = 5.0
    cls: float = 1.0
    smooth: float = 1.0
    sparse: float = 0.1

    def __post_init__(self) -> None:
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be nonnegative")

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


@dataclass
class LossReport:
    g_adv_ab: float = 0.0
    g_adv_ba: float = 0.0
    cyc_aba: float = 0.0
    cyc_bab: float = 0.0
    id_a: float = 0.0
    id_b: float = 0.0
    d_a: float = 0.0
    d_b: float = 0.0
    cls: float = 0.0
    smooth: float = 0.0
    sparse: float = 0.0
    total_g: float = 0.0
    total_d: float = 0.0

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def _nonempty(t: torch.Tensor, name: str) -> None:
    if t.numel() == 0:
        raise ValueError(f"{name}: empty tensor")


def lsgan_discriminator_loss(
    real_scores: torch.Tensor, fake_scores: torch.Tensor, real_target: float = 1.0
) -> torch.Tensor:
    """0.5 * mean((real - target)^2) + 0.5 * mean(fake^2)."""
    _nonempty(real_scores, "real_scores")
    _nonempty(fake_scores, "fake_scores")
    if not 0.0 < real_target <= 1.0:
        raise ValueError(f"real_target must lie in (0, 1], got {real_target}")
    return 0.5 * ((real_scores - real_target) ** 2).mean() + 0.5 * (fake_scores**2).mean()


def lsgan_generator_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    _nonempty(fake_scores, "fake_scores")
    return ((fake_scores - 1.0) ** 2).mean()


def _l1(a: torch.Tensor, b: torch.Tensor, name: str) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    _nonempty(a, name)
    return (a - b).abs().mean()


def cycle_loss(reconstructed: torch.Tensor, original: torch.Tensor) -> torch.Tensor:
    return _l1(reconstructed, original, "cycle_loss")


def identity_loss(mapped: torch.Tensor, original: torch.Tensor) -> torch.Tensor:
    return _l1(mapped, original, "identity_loss")


def classification_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean softmax cross-entropy over the artifact classes."""
    labels = torch.as_tensor(labels, dtype=torch.int64)
    if labels.numel() and (labels.min() < 0 or labels.max() >= NUM_CLASSES):
        raise ValueError(f"labels outside [0, {NUM_CLASSES - 1}]")
    return F.cross_entropy(logits, labels)


def _mask_hw(mask: torch.Tensor) -> torch.Tensor:
    # accepts H x W, B x 1 x H x W or B x H x W; returns ... x H x W
    if mask.dim() == 4:
        if mask.shape[1] != 1:
            raise ValueError(f"mask must have one channel, got {mask.shape[1]}")
        mask = mask[:, 0]
    if mask.dim() not in (2, 3):
        raise ValueError(f"unsupported mask shape {tuple(mask.shape)}")
    return mask


def smoothness_loss(mask: torch.Tensor) -> torch.Tensor:
    """Anisotropic total variation: mean vertical plus mean horizontal |step|."""
    m = _mask_hw(mask)
    if m.shape[-1] < 2 or m.shape[-2] < 2:
        raise ValueError(f"smoothness_loss needs H, W >= 2, got {tuple(m.shape[-2:])}")
    dv = (m[..., 1:, :] - m[..., :-1, :]).abs().mean()
    dh = (m[..., :, 1:] - m[..., :, :-1]).abs().mean()
    return dv + dh


def sparsity_loss(mask: torch.Tensor) -> torch.Tensor:
    m = _mask_hw(mask)
    _nonempty(m, "sparsity_loss")
    return m.mean()


def _get(components: Mapping[str, object], key: str):
    try:
        return components[key]
    except KeyError:
        raise MissingLossTerm(f"missing loss component {key!r}") from None


def compose_base(components: Mapping[str, object], w: LossWeights):
    """Generator and discriminator totals of the CycleGAN objective.

    The discriminator sum is returned separately because it is minimised by
    its own optimiser step.
    """
    c = {k: _get(components, k) for k in BASE_TERMS}
    total_g = (
        c["g_adv_ab"] + w.aba * c["cyc_aba"] + w.a * c["id_a"]
        + c["g_adv_ba"] + w.bab * c["cyc_bab"] + w.b * c["id_b"]
    )
    return total_g, c["d_a"] + c["d_b"]


def compose_ws(components: Mapping[str, object], w: LossWeights):
    """:func:`compose_base` plus the weighted classifier, smoothness and sparsity terms."""
    total_g, total_d = compose_base(components, w)
    c = {k: _get(components, k) for k in WS_TERMS}
    total_g = total_g + w.cls * c["cls"] + w.smooth * c["smooth"] + w.sparse * c["sparse"]
    return total_g, total_d
