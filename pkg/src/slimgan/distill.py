"""Discriminator-free distillation distance between student and teacher outputs.

The distance is a weighted sum of three terms: a pixel-space content loss
(guards against color shift), a perceptual loss over frozen feature maps
(preserves structure), and a total-variation penalty on the student output.
The teacher side is always treated as a constant: no gradient ever reaches
teacher parameters or teacher activations.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


class DistillError(ValueError):
    pass


@dataclass(frozen=True)
class DistillConfig:
    """Loss weights and the feature-extractor descriptor.

    ``extractor`` is either ``("fixed_random", seed, widths)`` for the
    built-in frozen random feature pyramid, or ``("external", path)`` to load
    a pretrained extractor from a checkpoint file. ``content_norm`` switches
    the content term between mean absolute ("l1") and mean squared ("l2")
    pixel error.
    """

    beta1: float = 1e-2
    beta2: float = 1.0
    beta3: float = 5e-8
    content_norm: str = "l1"
    extractor: tuple = ("fixed_random", 0, (16, 32))

    def __post_init__(self) -> None:
        if self.beta1 < 0 or self.beta2 < 0 or self.beta3 < 0:
            raise DistillError("loss weights must be non-negative")
        if self.beta1 == 0 and self.beta2 == 0 and self.beta3 == 0:
            raise DistillError("at least one loss weight must be positive")
        if self.content_norm not in ("l1", "l2"):
            raise DistillError(f"unknown content norm {self.content_norm!r}")

    @classmethod
    def psnr_oriented(cls, beta1: float = 1e-2, **kwargs) -> "DistillConfig":
        """Content-only preset: perceptual and TV terms switched off."""
        return cls(beta1=beta1, beta2=0.0, beta3=0.0, **kwargs)


def content_loss(student_out: torch.Tensor, teacher_out: torch.Tensor, norm: str = "l1") -> torch.Tensor:
    """Mean pixel difference over all elements (absolute by default)."""
    _check_shapes(student_out, teacher_out)
    diff = student_out - teacher_out
    if norm == "l1":
        return diff.abs().mean()
    if norm == "l2":
        return diff.square().mean()
    raise DistillError(f"unknown content norm {norm!r}")


def perceptual_loss(
    student_out: torch.Tensor, teacher_out: torch.Tensor, extractor: nn.Module
) -> torch.Tensor:
    """Mean squared feature difference, summed over the extractor's stages."""
    _check_shapes(student_out, teacher_out)
    feats_s = extractor(student_out)
    feats_t = extractor(teacher_out)
    total = None
    for fs, ft in zip(feats_s, feats_t):
        term = F.mse_loss(fs, ft)
        total = term if total is None else total + term
    if total is None:
        raise DistillError("extractor produced no feature maps")
    return total


def tv_loss(student_out: torch.Tensor) -> torch.Tensor:
    """Mean squared horizontal plus mean squared vertical neighbor difference."""
    if student_out.dim() < 2 or student_out.size(-1) < 2 or student_out.size(-2) < 2:
        raise DistillError("total variation needs spatial dims of at least 2")
    dh = student_out[..., :, 1:] - student_out[..., :, :-1]
    dv = student_out[..., 1:, :] - student_out[..., :-1, :]
    return dh.square().mean() + dv.square().mean()


def distance(
    student_out: torch.Tensor,
    teacher_out: torch.Tensor,
    cfg: DistillConfig,
    extractor: nn.Module | None = None,
) -> torch.Tensor:
    """The full distillation distance, differentiable in the student only."""
    teacher_out = teacher_out.detach()
    total = torch.zeros((), dtype=student_out.dtype)
    if cfg.beta1 > 0:
        total = total + cfg.beta1 * content_loss(student_out, teacher_out, cfg.content_norm)
    if cfg.beta2 > 0:
        if extractor is None:
            raise DistillError("perceptual term enabled but no extractor given")
        total = total + cfg.beta2 * perceptual_loss(student_out, teacher_out, extractor)
    if cfg.beta3 > 0:
        total = total + cfg.beta3 * tv_loss(student_out)
    return total


def distance_components(
    student_out: torch.Tensor,
    teacher_out: torch.Tensor,
    cfg: DistillConfig,
    extractor: nn.Module | None = None,
) -> dict[str, float]:
    """Unweighted values of the three terms, for logging."""
    with torch.no_grad():
        teacher_out = teacher_out.detach()
        components = {
            "content": float(content_loss(student_out, teacher_out, cfg.content_norm)),
            "tv": float(tv_loss(student_out)),
        }
        if extractor is not None:
            components["perceptual"] = float(
                perceptual_loss(student_out, teacher_out, extractor)
            )
        return components


class FeaturePyramid(nn.Module):
    """Fixed random convolutional feature pyramid.

    A stack of stride-2 3x3 convs with leaky-ReLU; every stage's output is a
    feature map fed to the perceptual loss. Weights are seeded and frozen, so
    the pyramid defines a deterministic, smooth distance without shipping any
    pretrained checkpoint.
    """

    def __init__(self, widths: tuple[int, ...] = (16, 32), in_channels: int = 3, seed: int = 0):
        super().__init__()
        if not widths:
            raise DistillError("feature pyramid needs at least one stage")
        generator = torch.Generator().manual_seed(seed)
        self.stages = nn.ModuleList()
        c = in_channels
        for width in widths:
            conv = nn.Conv2d(c, width, 3, stride=2, padding=1)
            with torch.no_grad():
                fan_in = c * 9
                conv.weight.copy_(
                    torch.randn(conv.weight.shape, generator=generator) / fan_in**0.5
                )
                conv.bias.zero_()
            self.stages.append(conv)
            c = width
        self.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for conv in self.stages:
            x = F.leaky_relu(conv(x), 0.2)
            feats.append(x)
        return feats


def build_extractor(descriptor: tuple, in_channels: int = 3) -> nn.Module:
    """Instantiate the extractor named by a config descriptor."""
    if not descriptor:
        raise DistillError("empty extractor descriptor")
    kind = descriptor[0]
    if kind == "fixed_random":
        _, seed, widths = descriptor
        return FeaturePyramid(tuple(widths), in_channels=in_channels, seed=int(seed))
    if kind == "external":
        from .checkpoint import load_checkpoint

        _, path = descriptor
        tensors, meta = load_checkpoint(path)
        widths = tuple(int(v) for v in meta.get("extractor_widths", "").split(",") if v)
        if not widths:
            raise DistillError(f"checkpoint {path} carries no extractor_widths metadata")
        pyramid = FeaturePyramid(widths, in_channels=in_channels)
        state = {name: tensor for name, tensor in tensors.items()}
        pyramid.load_state_dict(state)
        pyramid.requires_grad_(False)
        return pyramid
    raise DistillError(f"unknown extractor kind {kind!r}")


def _check_shapes(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise DistillError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
