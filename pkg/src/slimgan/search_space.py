"""Search space definitions: operator set, width ladders, and supernet layouts.

Two generator families are supported. The image-translation supernet keeps the
classic CycleGAN frame (7x7 stem, two stride-2 downsampling convs, nine
searchable body layers, two stride-2 transposed convs and a 7x7 output conv)
with searchable widths everywhere except the final RGB conv. The
super-resolution supernet keeps an SRResNet/ESRGAN-style frame (fixed stem,
residual-in-residual groups of searchable layers, trunk conv with a long skip,
two upsample+conv stages, an HR conv and a final RGB conv) with no
normalization anywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction


class OperatorKind(Enum):
    """The four searchable layer operators."""

    CONV1X1 = "Conv1x1"
    CONV3X3 = "Conv3x3"
    RESBLOCK = "ResBlock"
    DWSBLOCK = "DwsBlock"


#: Candidate expansion ratios, ascending. A layer's width candidates are these
#: fractions of its maximal width, rounded up to a multiple of 8.
EXPANSION_RATIOS: tuple[Fraction, ...] = (
    Fraction(1, 3),
    Fraction(1, 2),
    Fraction(3, 4),
    Fraction(5, 6),
    Fraction(1, 1),
)

WIDTH_STEP = 8


class SearchSpaceError(ValueError):
    """Raised for malformed layouts or out-of-space architectures."""


def candidate_widths(max_channels: int) -> tuple[int, ...]:
    """Width ladder for a layer with the given maximal channel count.

    Each expansion ratio maps to ``ceil(ratio * max / 8) * 8``; duplicates
    collapse to a single candidate. The result is strictly ascending and ends
    at ``max_channels``.
    """
    _check_width(max_channels)
    widths = []
    for ratio in EXPANSION_RATIOS:
        scaled = Fraction(max_channels) * ratio
        width = math.ceil(scaled / WIDTH_STEP) * WIDTH_STEP
        if width not in widths:
            widths.append(width)
    return tuple(widths)


def _check_width(channels: int) -> None:
    if channels <= 0 or channels % WIDTH_STEP != 0:
        raise SearchSpaceError(
            f"channel count must be a positive multiple of {WIDTH_STEP}, got {channels}"
        )


@dataclass(frozen=True)
class ConvOp:
    """A fixed (non-searchable) convolution.

    ``transposed`` marks a stride-2 transposed conv that doubles the spatial
    size; ``pre_upsample`` marks a bilinear 2x upsample applied before the
    conv. At most one of the two may be set.
    """

    kernel_size: int
    transposed: bool = False
    pre_upsample: bool = False

    def __post_init__(self) -> None:
        if self.transposed and self.pre_upsample:
            raise SearchSpaceError("a conv cannot be both transposed and pre-upsampled")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise SearchSpaceError(f"kernel size must be odd and positive, got {self.kernel_size}")

    @property
    def name(self) -> str:
        k = self.kernel_size
        prefix = "tconv" if self.transposed else "upconv" if self.pre_upsample else "conv"
        return f"{prefix}{k}x{k}"


@dataclass(frozen=True)
class LayerSpec:
    """One layer slot of a supernet.

    ``op`` is a concrete :class:`ConvOp` for fixed layers and ``None`` for
    layers whose operator is searched over :class:`OperatorKind`. Exactly one
    of ``width`` (fixed channels) and ``max_width`` (searchable, ladder via
    :func:`candidate_widths`) is set.
    """

    id: str
    role: str  # "stem" | "body" | "header"
    op: ConvOp | None = None
    width: int | None = None
    max_width: int | None = None
    stride: int = 1
    norm: str = "none"  # "instance_norm" | "none"
    activation: str = "none"  # "relu" | "lrelu" | "tanh" | "none"
    rir_group: int | None = None
    skip_from: str | None = None

    def __post_init__(self) -> None:
        if self.role not in ("stem", "body", "header"):
            raise SearchSpaceError(f"unknown role {self.role!r} for layer {self.id!r}")
        if self.op is None and self.role != "body":
            raise SearchSpaceError(f"searchable operator on non-body layer {self.id!r}")
        if (self.width is None) == (self.max_width is None):
            raise SearchSpaceError(f"layer {self.id!r} must fix either width or max_width")
        if self.stride not in (1, 2):
            raise SearchSpaceError(f"stride must be 1 or 2, got {self.stride}")
        if self.upsample != "none" and self.stride != 1:
            raise SearchSpaceError(f"upsampling layer {self.id!r} must have stride 1")
        if self.max_width is not None:
            _check_width(self.max_width)
        if "." in self.id or " " in self.id:
            raise SearchSpaceError(f"layer id {self.id!r} may not contain dots or spaces")

    @property
    def op_searchable(self) -> bool:
        return self.op is None

    @property
    def width_searchable(self) -> bool:
        return self.max_width is not None

    @property
    def upsample(self) -> str:
        if self.op is None:
            return "none"
        if self.op.transposed:
            return "transposed2x"
        if self.op.pre_upsample:
            return "bilinear2x"
        return "none"

    def width_candidates(self) -> tuple[int, ...]:
        if self.max_width is not None:
            return candidate_widths(self.max_width)
        assert self.width is not None
        return (self.width,)


@dataclass(frozen=True)
class SupernetSpec:
    """Ordered layer layout of a searchable generator."""

    task: str  # "translation" | "super_resolution"
    layers: tuple[LayerSpec, ...]
    input_channels: int = 3
    output_channels: int = 3
    sr_scale: int | None = None

    def __post_init__(self) -> None:
        if self.task not in ("translation", "super_resolution"):
            raise SearchSpaceError(f"unknown task {self.task!r}")
        ids = [layer.id for layer in self.layers]
        if len(set(ids)) != len(ids):
            raise SearchSpaceError("duplicate layer ids")

    def layer(self, layer_id: str) -> LayerSpec:
        for layer in self.layers:
            if layer.id == layer_id:
                return layer
        raise KeyError(layer_id)

    def searchable_op_layers(self) -> tuple[LayerSpec, ...]:
        return tuple(l for l in self.layers if l.op_searchable)

    def searchable_width_layers(self) -> tuple[LayerSpec, ...]:
        return tuple(l for l in self.layers if l.width_searchable)

    def input_widths(self) -> dict[str, tuple[int, ...]]:
        """Possible input channel counts per layer, following the width chain."""
        prev: tuple[int, ...] = (self.input_channels,)
        result = {}
        for layer in self.layers:
            result[layer.id] = prev
            prev = layer.width_candidates()
        return result


@dataclass(frozen=True)
class ArchLayer:
    """A resolved (operator, width) choice for one layer slot."""

    layer_id: str
    op: str
    width: int


@dataclass(frozen=True)
class Architecture:
    """A concrete generator: every slot resolved to one operator and width."""

    task: str
    layers: tuple[ArchLayer, ...]
    resolution_note: str = ""
    provenance: tuple[tuple[str, str], ...] = field(default_factory=tuple)

    def layer(self, layer_id: str) -> ArchLayer:
        for layer in self.layers:
            if layer.layer_id == layer_id:
                return layer
        raise KeyError(layer_id)

    def widths(self) -> dict[str, int]:
        return {l.layer_id: l.width for l in self.layers}


def op_name(layer: LayerSpec, kind: OperatorKind | None = None) -> str:
    """Schema name of a layer's operator: the fixed op or the chosen kind."""
    if layer.op is not None:
        return layer.op.name
    if kind is None:
        raise SearchSpaceError(f"searchable layer {layer.id!r} needs an operator choice")
    return kind.value


def build_translation_supernet(base_max_width: int = 256, body_layers: int = 9) -> SupernetSpec:
    """Image-translation supernet: CycleGAN frame with searchable body.

    Stem and header operators are fixed but their widths are searched; the
    final 7x7 conv is pinned to 3 output channels and carries no
    normalization. Instance normalization everywhere else.
    """
    _check_width(base_max_width)
    if body_layers < 1:
        raise SearchSpaceError("need at least one body layer")
    w = base_max_width
    layers = [
        LayerSpec("stem0", "stem", ConvOp(7), max_width=w, norm="instance_norm", activation="relu"),
        LayerSpec("stem1", "stem", ConvOp(3), max_width=w, stride=2, norm="instance_norm", activation="relu"),
        LayerSpec("stem2", "stem", ConvOp(3), max_width=w, stride=2, norm="instance_norm", activation="relu"),
    ]
    for i in range(1, body_layers + 1):
        layers.append(
            LayerSpec(f"b{i}", "body", max_width=w, norm="instance_norm", activation="relu")
        )
    layers += [
        LayerSpec("header1", "header", ConvOp(3, transposed=True), max_width=w, norm="instance_norm", activation="relu"),
        LayerSpec("header2", "header", ConvOp(3, transposed=True), max_width=w, norm="instance_norm", activation="relu"),
        LayerSpec("header3", "header", ConvOp(7), width=3, activation="tanh"),
    ]
    return SupernetSpec(task="translation", layers=tuple(layers))


def build_sr_supernet(
    body_max_width: int = 64, rir_groups: int = 5, group_layers: int = 5
) -> SupernetSpec:
    """Super-resolution supernet: SRResNet-style frame, searchable residual body.

    The body is ``rir_groups`` residual-in-residual groups of ``group_layers``
    searchable layers each; every group carries an additive skip from its
    input. A fixed trunk conv closes the body and adds the stem output back
    (long skip), then two bilinear-upsample+conv stages, an HR conv and the
    final RGB conv give the 4x output. No normalization anywhere.
    """
    _check_width(body_max_width)
    if rir_groups < 1 or group_layers < 1:
        raise SearchSpaceError("need at least one group and one layer per group")
    w = body_max_width
    layers = [LayerSpec("stem", "stem", ConvOp(3), width=w)]
    for g in range(1, rir_groups + 1):
        for j in range(1, group_layers + 1):
            layers.append(
                LayerSpec(f"rir{g}_op{j}", "body", max_width=w, activation="lrelu", rir_group=g)
            )
    layers += [
        LayerSpec("trunk", "header", ConvOp(3), width=w, skip_from="stem"),
        LayerSpec("up1", "header", ConvOp(3, pre_upsample=True), width=w, activation="lrelu"),
        LayerSpec("up2", "header", ConvOp(3, pre_upsample=True), width=w, activation="lrelu"),
        LayerSpec("hr", "header", ConvOp(3), width=w, activation="lrelu"),
        LayerSpec("final", "header", ConvOp(3), width=3),
    ]
    return SupernetSpec(task="super_resolution", layers=tuple(layers), sr_scale=4)


def max_architecture(spec: SupernetSpec) -> Architecture:
    """Every searchable slot at its widest width; ops default to ResBlock."""
    return _uniform_architecture(spec, lambda cands: cands[-1], OperatorKind.RESBLOCK)


def min_architecture(spec: SupernetSpec) -> Architecture:
    """Every searchable slot at its narrowest width; ops default to Conv1x1."""
    return _uniform_architecture(spec, lambda cands: cands[0], OperatorKind.CONV1X1)


def _uniform_architecture(spec, pick_width, kind) -> Architecture:
    layers = []
    for layer in spec.layers:
        width = layer.width if layer.width is not None else pick_width(layer.width_candidates())
        layers.append(ArchLayer(layer.id, op_name(layer, kind), width))
    return Architecture(task=spec.task, layers=tuple(layers))


def validate_architecture(arch: Architecture, spec: SupernetSpec) -> None:
    """Check an architecture against a supernet layout.

    Layer ids must match the layout in order. Operators must be the layer's
    fixed op, or one of the four searchable kinds for body slots. Fixed-width
    slots must match exactly; searchable slots accept any positive multiple of
    8 up to the slot's maximum, so hand-written reference architectures that
    predate the ladder (e.g. a 64-wide stem) remain importable.
    """
    if arch.task != spec.task:
        raise SearchSpaceError(f"architecture task {arch.task!r} does not match layout {spec.task!r}")
    if len(arch.layers) != len(spec.layers):
        raise SearchSpaceError(
            f"expected {len(spec.layers)} layers, got {len(arch.layers)}"
        )
    kind_names = {k.value for k in OperatorKind}
    for got, want in zip(arch.layers, spec.layers):
        if got.layer_id != want.id:
            raise SearchSpaceError(f"layer id mismatch: expected {want.id!r}, got {got.layer_id!r}")
        if want.op is not None:
            if got.op != want.op.name:
                raise SearchSpaceError(
                    f"layer {want.id!r} is fixed to {want.op.name!r}, got {got.op!r}"
                )
        elif got.op not in kind_names:
            raise SearchSpaceError(f"unknown operator {got.op!r} for layer {want.id!r}")
        if want.width is not None:
            if got.width != want.width:
                raise SearchSpaceError(
                    f"layer {want.id!r} width is fixed to {want.width}, got {got.width}"
                )
        else:
            assert want.max_width is not None
            if got.width <= 0 or got.width % WIDTH_STEP != 0 or got.width > want.max_width:
                raise SearchSpaceError(
                    f"layer {want.id!r} width {got.width} not in the searchable range "
                    f"(multiple of {WIDTH_STEP}, at most {want.max_width})"
                )


def architecture_kind(arch_layer: ArchLayer) -> "OperatorKind | ConvOp":
    """Concrete operator of a resolved layer, for cost accounting."""
    for kind in OperatorKind:
        if arch_layer.op == kind.value:
            return kind
    return _parse_fixed_op(arch_layer.op)


def _parse_fixed_op(name: str) -> ConvOp:
    for prefix, kwargs in (
        ("tconv", {"transposed": True}),
        ("upconv", {"pre_upsample": True}),
        ("conv", {}),
    ):
        if name.startswith(prefix):
            body = name[len(prefix):]
            parts = body.split("x")
            if len(parts) == 2 and parts[0] == parts[1] and parts[0].isdigit():
                return ConvOp(int(parts[0]), **kwargs)
    raise SearchSpaceError(f"unknown operator name {name!r}")


def with_provenance(arch: Architecture, **items: str) -> Architecture:
    pairs = tuple(arch.provenance) + tuple((k, str(v)) for k, v in items.items())
    return replace(arch, provenance=pairs)


def spec_for_architecture(arch: Architecture) -> SupernetSpec:
    """Reconstruct a supernet layout that contains the given architecture.

    Lets architecture files stand alone (cost reports, teacher loading)
    without a separate layout description. Searchable maxima are inferred
    from the widths actually used, which leaves costs and forward shapes
    unchanged.
    """
    ids = [l.layer_id for l in arch.layers]
    if arch.task == "translation":
        body = [i for i in ids if i.startswith("b") and i[1:].isdigit()]
        widest = max(
            (l.width for l in arch.layers if l.layer_id != "header3"), default=WIDTH_STEP
        )
        max_width = math.ceil(widest / WIDTH_STEP) * WIDTH_STEP
        spec = build_translation_supernet(max_width, body_layers=len(body))
    else:
        groups = 0
        per_group = 0
        for layer_id in ids:
            if layer_id.startswith("rir"):
                g, _, j = layer_id[3:].partition("_op")
                groups = max(groups, int(g))
                per_group = max(per_group, int(j))
        stem_width = arch.layer("stem").width
        spec = build_sr_supernet(stem_width, rir_groups=groups, group_layers=per_group)
    validate_architecture(arch, spec)
    return spec
