"""Generators, patch discriminators and the small heads around them.

All modules take channels-first tensors (``B x C x H x W``). Spatial
convolutions use reflection padding; transposed convolutions cannot, and use
zero padding.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn as nn

from .data import NUM_CLASSES

GENERATOR_ARCHS = ("unet", "attention_unet")


@dataclass(frozen=True)
class GeneratorSpec:
    arch: str = "unet"
    in_channels: int = 3
    base_width: int = 32
    depth: int = 4

    def __post_init__(self) -> None:
        if self.arch not in GENERATOR_ARCHS:
            raise ValueError(f"unknown generator arch {self.arch!r}")
        if self.in_channels not in (3, 4, 3 + NUM_CLASSES):
            raise ValueError(f"in_channels must be 3, 4 or {3 + NUM_CLASSES}, got {self.in_channels}")
        if self.depth < 1:
            raise ValueError("depth must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DiscriminatorSpec:
    in_channels: int = 3
    widths: tuple[int, ...] = (64, 128, 256, 512)

    def __post_init__(self) -> None:
        if self.in_channels not in (3, 3 + NUM_CLASSES):
            raise ValueError(f"in_channels must be 3 or {3 + NUM_CLASSES}, got {self.in_channels}")

    def to_dict(self) -> dict:
        return {"in_channels": self.in_channels, "widths": list(self.widths)}


class GeneratorOutput(NamedTuple):
    image: torch.Tensor
    penultimate: torch.Tensor


def _check_input(x: torch.Tensor, channels: int, name: str) -> None:
    if x.dim() != 4:
        raise ValueError(f"{name}: expected B x C x H x W input, got shape {tuple(x.shape)}")
    if x.shape[1] != channels:
        raise ValueError(f"{name}: expected {channels} input channels, got {x.shape[1]}")


class RGBProjector(nn.Module):
    """Per-pixel affine map from feature channels to RGB, then tanh."""

    def __init__(self, features: int):
        super().__init__()
        self.features = features
        self.proj = nn.Conv2d(features, 3, kernel_size=1)

    def forward(self, g: torch.Tensor) -> torch.Tensor:
        _check_input(g, self.features, "RGBProjector")
        return torch.tanh(self.proj(g))


class AttentionHead(nn.Module):
    """Two-layer per-pixel MLP on generator features, sigmoid output."""

    def __init__(self, features: int, hidden: int | None = None):
        super().__init__()
        self.features = features
        hidden = hidden or max(features // 2, 1)
        self.mlp = nn.Sequential(
            nn.Conv2d(features, hidden, kernel_size=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, 1, kernel_size=1),
        )

    def forward(self, g: torch.Tensor) -> torch.Tensor:
        _check_input(g, self.features, "AttentionHead")
        return torch.sigmoid(self.mlp(g))


def _down(cin: int, cout: int, norm: bool = True) -> nn.Sequential:
    layers: list[nn.Module] = [nn.Conv2d(cin, cout, 4, stride=2, padding=1, padding_mode="reflect")]
    if norm:
        layers.append(nn.InstanceNorm2d(cout, affine=True))
    layers.append(nn.LeakyReLU(0.2, inplace=True))
    return nn.Sequential(*layers)


def _up(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1),
        nn.InstanceNorm2d(cout, affine=True),
        nn.ReLU(inplace=True),
    )


class AttentionGate(nn.Module):
    """Additive gate on a skip connection, driven by the coarser decoder signal."""

    def __init__(self, skip_ch: int, gate_ch: int, inter_ch: int):
        super().__init__()
        self.theta = nn.Conv2d(skip_ch, inter_ch, 1)
        self.phi = nn.Conv2d(gate_ch, inter_ch, 1)
        self.psi = nn.Conv2d(inter_ch, 1, 1)

    def forward(self, skip: torch.Tensor, gate: torch.Tensor) -> torch.Tensor:
        a = torch.relu(self.theta(skip) + self.phi(gate))
        return skip * torch.sigmoid(self.psi(a))


class UNetGenerator(nn.Module):
    """UNet (optionally with attention-gated skips) exposing its penultimate features.

    The penultimate map ``g`` is the full-resolution feature tensor after the
    last decoder stage; the output image is ``to_rgb(g)``.
    """

    def __init__(self, spec: GeneratorSpec = GeneratorSpec()):
        super().__init__()
        self.spec = spec
        w = spec.base_width
        widths = [min(w * 2**i, w * 8) for i in range(spec.depth + 1)]
        self.stem = nn.Sequential(
            nn.Conv2d(spec.in_channels, w, 3, padding=1, padding_mode="reflect"),
            nn.LeakyReLU(0.2, inplace=True),
        )
        self.downs = nn.ModuleList(
            _down(widths[i], widths[i + 1], norm=i + 1 < spec.depth) for i in range(spec.depth)
        )
        self.ups = nn.ModuleList()
        self.gates = nn.ModuleList()
        for i in reversed(range(spec.depth)):
            cin = widths[i + 1] if i == spec.depth - 1 else widths[i + 1] * 2
            self.ups.append(_up(cin, widths[i]))
            if spec.arch == "attention_unet":
                self.gates.append(AttentionGate(widths[i], cin, max(widths[i] // 2, 1)))
        self.fuse = nn.Sequential(
            nn.Conv2d(2 * w, w, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(w, affine=True),
            nn.ReLU(inplace=True),
        )
        self.features = w
        self.to_rgb = RGBProjector(w)

    def forward(self, x: torch.Tensor) -> GeneratorOutput:
        _check_input(x, self.spec.in_channels, "generator")
        k = 2**self.spec.depth
        if x.shape[2] % k or x.shape[3] % k:
            raise ValueError(f"generator: spatial size {tuple(x.shape[2:])} not divisible by {k}")
        skips = [self.stem(x)]
        for down in self.downs:
            skips.append(down(skips[-1]))
        h = skips.pop()
        for j, up in enumerate(self.ups):
            skip = skips.pop()
            if self.gates:
                # gating signal: coarser decoder state brought to the skip resolution
                skip = self.gates[j](skip, nn.functional.interpolate(h, size=skip.shape[2:], mode="nearest"))
            h = torch.cat([up(h), skip], dim=1)
        g = self.fuse(h)
        return GeneratorOutput(self.to_rgb(g), g)


class PatchDiscriminator(nn.Module):
    """Least-squares patch discriminator: three stride-2 then two stride-1 convolutions."""

    def __init__(self, spec: DiscriminatorSpec = DiscriminatorSpec()):
        super().__init__()
        self.spec = spec
        w = spec.widths
        layers: list[nn.Module] = []
        cin = spec.in_channels
        for i, cout in enumerate(w[:-1]):
            layers.append(nn.Conv2d(cin, cout, 4, stride=2, padding=1, padding_mode="reflect"))
            if i > 0:
                layers.append(nn.InstanceNorm2d(cout, affine=True))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            cin = cout
        layers += [
            nn.Conv2d(cin, w[-1], 4, stride=1, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(w[-1], affine=True),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(w[-1], 1, 4, stride=1, padding=1, padding_mode="reflect"),
        ]
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_input(x, self.spec.in_channels, "discriminator")
        return self.net(x)


def patch_output_size(size: int, n_strided: int = 3) -> int:
    """Score-map side length for a ``size`` input under the fixed recipe."""
    for _ in range(n_strided):
        size = (size + 2 - 4) // 2 + 1
    for _ in range(2):
        size = size + 2 - 4 + 1
    return size


class ArtifactClassifier(nn.Module):
    """Stride-2 conv stack, global average pool, linear to class logits."""

    def __init__(self, n_classes: int = NUM_CLASSES, widths: tuple[int, ...] = (16, 32, 64, 128)):
        super().__init__()
        layers: list[nn.Module] = []
        cin = 3
        for cout in widths:
            layers += [
                nn.Conv2d(cin, cout, 3, stride=2, padding=1, padding_mode="reflect"),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            cin = cout
        self.features = nn.Sequential(*layers)
        self.fc = nn.Linear(cin, n_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_input(x, 3, "classifier")
        return self.fc(self.features(x).mean(dim=(2, 3)))


def classify(clf: ArtifactClassifier, image: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Logits for ``image * mask``, the mask broadcast over colour channels."""
    if mask.dim() != 4 or mask.shape[1] != 1:
        raise ValueError(f"mask must be B x 1 x H x W, got {tuple(mask.shape)}")
    if mask.shape[0] != image.shape[0] or mask.shape[2:] != image.shape[2:]:
        raise ValueError(f"mask {tuple(mask.shape)} does not match image {tuple(image.shape)}")
    return clf(image * mask)


def encode_condition(label: int, height: int, width: int) -> torch.Tensor:
    """One-hot ``NUM_CLASSES x H x W`` map with channel ``label`` set to ones."""
    if not 0 <= int(label) < NUM_CLASSES:
        raise ValueError(f"label {label} outside [0, {NUM_CLASSES - 1}]")
    out = torch.zeros(NUM_CLASSES, height, width)
    out[int(label)] = 1.0
    return out


def encode_conditions(labels: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Batched :func:`encode_condition`: ``B`` labels to ``B x 7 x H x W``."""
    labels = torch.as_tensor(labels, dtype=torch.int64)
    if labels.numel() and (labels.min() < 0 or labels.max() >= NUM_CLASSES):
        raise ValueError(f"labels outside [0, {NUM_CLASSES - 1}]")
    onehot = nn.functional.one_hot(labels, NUM_CLASSES).to(torch.float32)
    return onehot[:, :, None, None].expand(-1, -1, height, width).contiguous()


def build_generator(spec: GeneratorSpec) -> UNetGenerator:
    return UNetGenerator(spec)


def build_discriminator(spec: DiscriminatorSpec) -> PatchDiscriminator:
    return PatchDiscriminator(spec)
