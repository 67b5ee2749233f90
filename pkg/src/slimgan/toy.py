"""Synthetic desk-scale task: a small frozen teacher plus procedural textures.

The teacher is a compact derived generator with seeded random weights; its
outputs define the distillation targets, which is all the search needs — the
framework never looks inside the teacher. The dataset is a deterministic mix
of sinusoidal gratings, checkerboards and radial gradients in [-1, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .search_space import (
    Architecture,
    ArchLayer,
    OperatorKind,
    SupernetSpec,
    build_sr_supernet,
    build_translation_supernet,
    op_name,
)
from .supernet import DerivedGenerator, GeneratorSupernet

TOY_KINDS = ("translation_toy", "sr_toy")


@dataclass
class TeacherModel:
    """A frozen generator used only for producing distillation targets."""

    module: DerivedGenerator
    spec: SupernetSpec
    architecture: Architecture

    def __post_init__(self) -> None:
        self.module.requires_grad_(False)
        self.module.eval()

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.module(x)

    def parameter_count(self) -> int:
        from .supernet import extract_student_weights

        bundle = extract_student_weights(self.module.net, self.architecture)
        return sum(t.numel() for t in bundle.values())


@dataclass
class ToyTask:
    kind: str
    teacher: TeacherModel
    images: torch.Tensor  # [N, 3, H, W] in [-1, 1]


def make_toy_task(
    kind: str, seed: int, size: int = 256, image_size: int = 16, teacher_width: int = 48
) -> ToyTask:
    """Build the frozen toy teacher and its procedural dataset.

    The same seed always yields byte-identical teacher weights and images.
    """
    if kind not in TOY_KINDS:
        raise ValueError(f"unknown toy kind {kind!r}; expected one of {TOY_KINDS}")
    if size < 1 or image_size < 4 or image_size % 4:
        raise ValueError("toy datasets need size >= 1 and image_size a positive multiple of 4")
    images = _procedural_textures(size, image_size, seed)
    if kind == "translation_toy":
        # The teacher's stride-4 bottleneck carries more detail than any
        # narrower student can, so distillation genuinely rewards width.
        spec = build_translation_supernet(teacher_width, body_layers=2)
        body_ops = (OperatorKind.RESBLOCK, OperatorKind.CONV3X3)
    else:
        spec = build_sr_supernet(16, rir_groups=2, group_layers=2)
        body_ops = (
            OperatorKind.CONV3X3,
            OperatorKind.RESBLOCK,
            OperatorKind.DWSBLOCK,
            OperatorKind.CONV1X1,
        )
    arch = _max_width_architecture(spec, body_ops)
    torch.manual_seed(seed + 1)
    net = GeneratorSupernet(spec)
    teacher = TeacherModel(DerivedGenerator(net, arch), spec, arch)
    return ToyTask(kind=kind, teacher=teacher, images=images)


def _max_width_architecture(spec: SupernetSpec, body_ops) -> Architecture:
    layers = []
    body_index = 0
    for layer in spec.layers:
        if layer.op_searchable:
            kind = body_ops[body_index % len(body_ops)]
            body_index += 1
            name = op_name(layer, kind)
        else:
            name = op_name(layer)
        width = layer.width if layer.width is not None else layer.width_candidates()[-1]
        layers.append(ArchLayer(layer.id, name, width))
    return Architecture(task=spec.task, layers=tuple(layers))


def _procedural_textures(n: int, side: int, seed: int) -> torch.Tensor:
    generator = torch.Generator().manual_seed(seed)
    ys = torch.linspace(0.0, 1.0, side).view(side, 1).expand(side, side)
    xs = torch.linspace(0.0, 1.0, side).view(1, side).expand(side, side)

    freq = torch.rand((n, 3, 2), generator=generator) * 3.0 + 0.5
    phase = torch.rand((n, 3, 2), generator=generator) * (2 * math.pi)
    amp = torch.rand((n, 3, 3), generator=generator)
    center = torch.rand((n, 1, 2), generator=generator)
    checker_period = torch.randint(2, max(3, side // 2), (n, 1), generator=generator)

    images = torch.empty((n, 3, side, side))
    for i in range(n):
        radial = ((xs - center[i, 0, 0]) ** 2 + (ys - center[i, 0, 1]) ** 2).sqrt()
        period = int(checker_period[i, 0])
        idx = torch.arange(side)
        checker = (((idx // period).view(side, 1) + (idx // period).view(1, side)) % 2).float()
        checker = checker * 2.0 - 1.0
        for c in range(3):
            grating_x = torch.sin(2 * math.pi * freq[i, c, 0] * xs + phase[i, c, 0])
            grating_y = torch.sin(2 * math.pi * freq[i, c, 1] * ys + phase[i, c, 1])
            mix = (
                amp[i, c, 0] * grating_x
                + amp[i, c, 1] * grating_y
                + amp[i, c, 2] * (checker * torch.exp(-2.0 * radial))
            )
            images[i, c] = mix
    return torch.tanh(images)
