"""The differentiable supernet.

Every convolution stores one kernel at maximal width (a superkernel); a
narrower width uses the leading channel slice, so all width candidates share
weights. Operators are mixed by the softmax of per-layer operator logits;
widths are sampled one-hot per layer through a straight-through
Gumbel-Softmax. In search mode a sampled layer runs at its widest candidate
and is gated by a hard channel-prefix mask whose gradient flows through the
relaxed probabilities, so the forward value equals the plain sliced
computation while every width logit receives a counterfactual gradient for
the channels it would add or remove. Derived mode follows one concrete
operator and width per layer with no mixing, sampling or masking.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .search_space import (
    Architecture,
    ConvOp,
    LayerSpec,
    OperatorKind,
    SupernetSpec,
    architecture_kind,
)

_GUMBEL_EPS = 1e-20


class SupernetError(ValueError):
    pass


@dataclass
class WidthSample:
    """One categorical width draw: hard index plus the relaxed probabilities."""

    index: int
    soft_probs: torch.Tensor
    straight_through: torch.Tensor

    @property
    def one_hot(self) -> torch.Tensor:
        return F.one_hot(torch.tensor(self.index), self.soft_probs.numel()).to(self.soft_probs.dtype)


def sample_width(
    gamma_i: torch.Tensor,
    temperature: float = 1.0,
    generator: torch.Generator | None = None,
) -> WidthSample:
    """Straight-through Gumbel-Softmax draw over width candidates.

    The forward value of ``straight_through`` is exactly the hard one-hot
    vector; its gradient is that of the relaxed softmax, so scaling a branch
    output by ``straight_through[index]`` multiplies by 1.0 while letting
    gradients reach the logits.
    """
    if not torch.isfinite(gamma_i).all():
        raise SupernetError("non-finite width logits")
    if temperature <= 0:
        raise SupernetError(f"temperature must be positive, got {temperature}")
    u = torch.rand(gamma_i.shape, generator=generator, dtype=gamma_i.dtype)
    gumbel = -torch.log(-torch.log(u + _GUMBEL_EPS) + _GUMBEL_EPS)
    soft = torch.softmax((gamma_i + gumbel) / temperature, dim=-1)
    index = int(soft.argmax().item())
    hard = torch.zeros_like(soft)
    hard[index] = 1.0
    straight_through = (hard - soft).detach() + soft
    return WidthSample(index=index, soft_probs=soft, straight_through=straight_through)


class SuperConv2d(nn.Module):
    """Convolution backed by a maximal-width kernel, sliced per call.

    ``weight`` is laid out ``[max_out, max_in, k, k]`` (``[max_in, max_out,
    k, k]`` for the transposed variant, ``[max_ch, 1, k, k]`` for depthwise).
    Slices are views: an optimizer step taken through a slice updates the
    superkernel's leading channels in place and leaves the rest untouched.
    """

    def __init__(
        self,
        max_in: int,
        max_out: int,
        kernel_size: int,
        stride: int = 1,
        transposed: bool = False,
        depthwise: bool = False,
        bias: bool = True,
    ):
        super().__init__()
        if depthwise and max_in != max_out:
            raise SupernetError("depthwise superkernels need max_in == max_out")
        self.max_in = max_in
        self.max_out = max_out
        self.kernel_size = kernel_size
        self.stride = stride
        self.transposed = transposed
        self.depthwise = depthwise
        if depthwise:
            shape = (max_out, 1, kernel_size, kernel_size)
        elif transposed:
            shape = (max_in, max_out, kernel_size, kernel_size)
        else:
            shape = (max_out, max_in, kernel_size, kernel_size)
        weight = torch.empty(shape)
        fan_in = kernel_size * kernel_size * (1 if depthwise else max_in)
        nn.init.normal_(weight, std=fan_in**-0.5)
        self.weight = nn.Parameter(weight)
        self.bias = nn.Parameter(torch.zeros(max_out)) if bias else None

    def slice_weight(self, in_w: int, out_w: int) -> torch.Tensor:
        if not (1 <= in_w <= self.max_in and 1 <= out_w <= self.max_out):
            raise SupernetError(
                f"slice ({in_w}, {out_w}) outside superkernel ({self.max_in}, {self.max_out})"
            )
        if self.depthwise:
            if in_w != out_w:
                raise SupernetError("depthwise slices need in_w == out_w")
            return self.weight[:out_w]
        if self.transposed:
            return self.weight[:in_w, :out_w]
        return self.weight[:out_w, :in_w]

    def forward(self, x: torch.Tensor, out_w: int) -> torch.Tensor:
        in_w = x.size(1)
        weight = self.slice_weight(in_w, out_w)
        bias = self.bias[:out_w] if self.bias is not None else None
        pad = self.kernel_size // 2
        if self.transposed:
            return F.conv_transpose2d(x, weight, bias, stride=2, padding=pad, output_padding=1)
        if self.depthwise:
            return F.conv2d(x, weight, bias, stride=self.stride, padding=pad, groups=in_w)
        return F.conv2d(x, weight, bias, stride=self.stride, padding=pad)


def slice_superkernel(kernel: SuperConv2d, in_w: int, out_w: int) -> torch.Tensor:
    """Leading-channel view of a superkernel; writes propagate to the whole."""
    return kernel.slice_weight(in_w, out_w)


def _norm(x: torch.Tensor, kind: str) -> torch.Tensor:
    if kind == "instance_norm":
        return F.instance_norm(x)
    return x


def _act(x: torch.Tensor, kind: str) -> torch.Tensor:
    if kind == "relu":
        return F.relu(x)
    if kind == "lrelu":
        return F.leaky_relu(x, 0.2)
    if kind == "tanh":
        return torch.tanh(x)
    return x


def _apply_mask(y: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    return y if mask is None else y * mask


class Conv1x1Op(nn.Module):
    def __init__(self, max_in, max_out, stride=1, norm="none", act="relu"):
        super().__init__()
        self.conv = SuperConv2d(max_in, max_out, 1, stride=stride)
        self.norm, self.act = norm, act

    def forward(self, x, out_w, mask=None, identity_skip=None):
        return _act(_norm(self.conv(x, out_w), self.norm), self.act)


class Conv3x3Op(nn.Module):
    def __init__(self, max_in, max_out, stride=1, norm="none", act="relu"):
        super().__init__()
        self.conv = SuperConv2d(max_in, max_out, 3, stride=stride)
        self.norm, self.act = norm, act

    def forward(self, x, out_w, mask=None, identity_skip=None):
        return _act(_norm(self.conv(x, out_w), self.norm), self.act)


class ResBlockOp(nn.Module):
    """Two 3x3 convs with an additive skip; 1x1 projection when widths differ.

    The internal feature width equals the output width, so a layer-level
    width mask also gates the hidden stage. When the caller computes at full
    width behind a mask, the tensor shapes no longer reflect the sampled
    widths, so it passes ``identity_skip`` explicitly.
    """

    def __init__(self, max_in, max_out, stride=1, norm="none", act="relu"):
        super().__init__()
        self.conv1 = SuperConv2d(max_in, max_out, 3, stride=stride)
        self.conv2 = SuperConv2d(max_out, max_out, 3)
        self.project = SuperConv2d(max_in, max_out, 1, stride=stride)
        self.stride = stride
        self.norm, self.act = norm, act

    def forward(self, x, out_w, mask=None, identity_skip=None):
        if identity_skip is None:
            identity_skip = x.size(1) == out_w and self.stride == 1
        y = _apply_mask(_act(_norm(self.conv1(x, out_w), self.norm), self.act), mask)
        y = _norm(self.conv2(y, out_w), self.norm)
        skip = x if identity_skip else self.project(x, out_w)
        return y + skip


class DwsBlockOp(nn.Module):
    """1x1 conv, depthwise 3x3, 1x1 conv; identity skip when shapes match."""

    def __init__(self, max_in, max_out, stride=1, norm="none", act="relu"):
        super().__init__()
        self.pw1 = SuperConv2d(max_in, max_out, 1, stride=stride)
        self.dw = SuperConv2d(max_out, max_out, 3, depthwise=True)
        self.pw2 = SuperConv2d(max_out, max_out, 1)
        self.stride = stride
        self.norm, self.act = norm, act

    def forward(self, x, out_w, mask=None, identity_skip=None):
        if identity_skip is None:
            identity_skip = x.size(1) == out_w and self.stride == 1
        y = _apply_mask(_act(_norm(self.pw1(x, out_w), self.norm), self.act), mask)
        y = _apply_mask(_act(_norm(self.dw(y, out_w), self.norm), self.act), mask)
        y = _norm(self.pw2(y, out_w), self.norm)
        if identity_skip:
            y = y + x
        return y


_BRANCH_TYPES = {
    OperatorKind.CONV1X1: Conv1x1Op,
    OperatorKind.CONV3X3: Conv3x3Op,
    OperatorKind.RESBLOCK: ResBlockOp,
    OperatorKind.DWSBLOCK: DwsBlockOp,
}


class SearchableLayer(nn.Module):
    """All four operator candidates side by side, each with its own superkernels."""

    def __init__(self, layer: LayerSpec, max_in: int):
        super().__init__()
        max_out = layer.max_width if layer.max_width is not None else layer.width
        self.branches = nn.ModuleList(
            _BRANCH_TYPES[kind](max_in, max_out, layer.stride, layer.norm, layer.activation)
            for kind in OperatorKind
        )

    def forward(
        self, x: torch.Tensor, op_weights: torch.Tensor, out_w: int, mask=None, identity_skip=None
    ) -> torch.Tensor:
        if op_weights.numel() != len(self.branches):
            raise SupernetError("expected one mixing weight per operator candidate")
        out = None
        for weight, branch in zip(op_weights, self.branches):
            term = weight * branch(x, out_w, mask, identity_skip)
            out = term if out is None else out + term
        return out

    def forward_single(self, x: torch.Tensor, kind: OperatorKind, out_w: int) -> torch.Tensor:
        index = list(OperatorKind).index(kind)
        return self.branches[index](x, out_w)


class FixedLayer(nn.Module):
    """A fixed-operator layer; its width may still be searchable."""

    def __init__(self, layer: LayerSpec, max_in: int):
        super().__init__()
        max_out = layer.max_width if layer.max_width is not None else layer.width
        op = layer.op
        assert op is not None
        self.pre_upsample = op.pre_upsample
        self.conv = SuperConv2d(
            max_in, max_out, op.kernel_size, stride=layer.stride, transposed=op.transposed
        )
        self.norm, self.act = layer.norm, layer.activation

    def forward(self, x: torch.Tensor, out_w: int) -> torch.Tensor:
        if self.pre_upsample:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return _act(_norm(self.conv(x, out_w), self.norm), self.act)


class ArchParams(nn.Module):
    """Learnable operator logits (alpha) and width logits (gamma) per layer.

    Initialized to zeros, i.e. uniform choice probabilities.
    """

    def __init__(self, spec: SupernetSpec, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.alpha = nn.ParameterDict(
            {
                layer.id: nn.Parameter(torch.zeros(len(OperatorKind), dtype=dtype))
                for layer in spec.searchable_op_layers()
            }
        )
        self.gamma = nn.ParameterDict(
            {
                layer.id: nn.Parameter(torch.zeros(len(layer.width_candidates()), dtype=dtype))
                for layer in spec.searchable_width_layers()
            }
        )

    def alpha_dict(self, detach: bool = False) -> dict[str, torch.Tensor]:
        return {k: (v.detach() if detach else v) for k, v in self.alpha.items()}

    def gamma_dict(self, detach: bool = False) -> dict[str, torch.Tensor]:
        return {k: (v.detach() if detach else v) for k, v in self.gamma.items()}


def _add_leading(y: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
    """Additive skip over the leading channels shared by both tensors."""
    m = min(y.size(1), skip.size(1))
    if y.size(1) == m and skip.size(1) == m:
        return y + skip
    if y.size(1) == m:
        return y + skip[:, :m]
    return torch.cat([y[:, :m] + skip[:, :m], y[:, m:]], dim=1)


def _width_mask(
    soft: torch.Tensor, candidates: tuple[int, ...], sampled: int, physical: int
) -> torch.Tensor:
    """Straight-through channel mask for one sampled width.

    The layer is computed at its widest candidate width; the mask's value is
    a hard prefix of ones up to the sampled width and zeros beyond, so the
    forward equals the plain sliced computation. The gradient path sums, per
    channel, the relaxed probabilities of the candidates that would keep that
    channel alive. Each width logit therefore sees a counterfactual signal
    for the channels it would add or remove, which survives downstream
    normalization (a channel-group mask changes content, unlike a global
    rescale that per-channel normalization cancels).
    """
    soft_mask = torch.zeros(physical, dtype=soft.dtype)
    for j, w in enumerate(candidates):
        live = min(w, physical)
        prefix = torch.cat(
            [torch.ones(live, dtype=soft.dtype), torch.zeros(physical - live, dtype=soft.dtype)]
        )
        soft_mask = soft_mask + soft[j] * prefix
    hard = torch.cat(
        [
            torch.ones(sampled, dtype=soft.dtype),
            torch.zeros(physical - sampled, dtype=soft.dtype),
        ]
    )
    mask = hard + (soft_mask - soft_mask.detach())
    return mask.view(1, physical, 1, 1)


class GeneratorSupernet(nn.Module):
    """A generator supernet built from a :class:`SupernetSpec`."""

    def __init__(self, spec: SupernetSpec):
        super().__init__()
        self.spec = spec
        modules = {}
        max_in = spec.input_channels
        for layer in spec.layers:
            if layer.op_searchable:
                modules[layer.id] = SearchableLayer(layer, max_in)
            else:
                modules[layer.id] = FixedLayer(layer, max_in)
            max_in = layer.max_width if layer.max_width is not None else layer.width
        self.layers = nn.ModuleDict(modules)
        self._save_ids = {l.skip_from for l in spec.layers if l.skip_from is not None}

    def forward(
        self,
        x: torch.Tensor,
        alpha: dict[str, torch.Tensor] | None = None,
        gamma: dict[str, torch.Tensor] | None = None,
        mode: str = "search",
        architecture: Architecture | None = None,
        generator: torch.Generator | None = None,
        temperature: float = 1.0,
        width_override=None,
        act_transform=None,
    ) -> torch.Tensor:
        """Run the supernet.

        Search mode mixes all operators by ``softmax(alpha)`` and samples one
        width per layer from ``gamma`` (unless ``width_override`` pins the
        widths: "max", "min", or a per-layer candidate-index dict). Derived
        mode follows ``architecture`` exactly, with no mixing or sampling.
        ``act_transform``, when given, is applied to every layer output.
        """
        self._check_input(x)
        if mode not in ("search", "derived"):
            raise SupernetError(f"unknown mode {mode!r}")
        if mode == "derived" and architecture is None:
            raise SupernetError("derived mode needs an architecture")
        arch_widths = architecture.widths() if architecture is not None else {}
        saved: dict[str, torch.Tensor] = {}
        group_id: int | None = None
        group_input: torch.Tensor | None = None
        group_mask: torch.Tensor | None = None

        def close_group(t: torch.Tensor) -> torch.Tensor:
            t = _add_leading(t, group_input)
            # the skip may carry wider content than the group's sampled
            # output width; re-gate so masked channels stay zero
            return t if group_mask is None else t * group_mask

        effective_in = self.spec.input_channels
        for layer in self.spec.layers:
            if layer.rir_group != group_id:
                if group_id is not None:
                    x = close_group(x)
                group_id = layer.rir_group
                group_input = x if group_id is not None else None
                group_mask = None
            out_w, sampled_w, mask = self._resolve_width(
                layer, gamma, mode, arch_widths, width_override, generator, temperature
            )
            module = self.layers[layer.id]
            if layer.op_searchable:
                if mode == "derived":
                    kind = architecture_kind(architecture.layer(layer.id))
                    y = module.forward_single(x, kind, out_w)
                else:
                    if alpha is None or layer.id not in alpha:
                        raise SupernetError(f"missing operator logits for layer {layer.id!r}")
                    identity_skip = effective_in == sampled_w and layer.stride == 1
                    y = module(
                        x, torch.softmax(alpha[layer.id], dim=-1), out_w, mask, identity_skip
                    )
            else:
                y = module(x, out_w)
            if mask is not None:
                y = y * mask
            if group_id is not None:
                group_mask = mask
            if layer.skip_from is not None:
                y = y + saved[layer.skip_from]
            if act_transform is not None:
                y = act_transform(y)
            if layer.id in self._save_ids:
                saved[layer.id] = y
            x = y
            effective_in = sampled_w
        if group_id is not None:
            x = close_group(x)
        return x

    def _check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 4 or x.size(1) != self.spec.input_channels:
            raise SupernetError(
                f"expected input [batch, {self.spec.input_channels}, H, W], got {tuple(x.shape)}"
            )
        if self.spec.task == "translation":
            h, w = x.size(2), x.size(3)
            if h < 4 or w < 4 or h % 4 or w % 4:
                raise SupernetError(
                    "translation inputs need spatial dims that are multiples of 4 (and at least 4)"
                )

    def _resolve_width(
        self, layer, gamma, mode, arch_widths, width_override, generator, temperature
    ) -> tuple[int, int, torch.Tensor | None]:
        """Computed width, effective (sampled) width, and the gate mask."""
        if layer.width is not None:
            return layer.width, layer.width, None
        candidates = layer.width_candidates()
        if mode == "derived":
            width = arch_widths[layer.id]
            return width, width, None
        if width_override is not None:
            if width_override == "max":
                width = candidates[-1]
            elif width_override == "min":
                width = candidates[0]
            else:
                width = candidates[width_override[layer.id]]
            return width, width, None
        if gamma is None or layer.id not in gamma:
            raise SupernetError(f"missing width logits for layer {layer.id!r}")
        sample = sample_width(gamma[layer.id], temperature, generator)
        sampled = candidates[sample.index]
        physical = candidates[-1]
        return physical, sampled, _width_mask(sample.soft_probs, candidates, sampled, physical)


class DerivedGenerator(nn.Module):
    """A supernet pinned to one concrete architecture."""

    def __init__(self, net: GeneratorSupernet, architecture: Architecture):
        super().__init__()
        self.net = net
        self.architecture = architecture

    def forward(self, x: torch.Tensor, act_transform=None) -> torch.Tensor:
        return self.net(
            x, mode="derived", architecture=self.architecture, act_transform=act_transform
        )


def extract_student_weights(net: GeneratorSupernet, architecture: Architecture) -> dict[str, torch.Tensor]:
    """Materialize the weight slices a derived architecture actually uses.

    Returns compact copies keyed by the supernet's parameter names, so the
    bundle can be loaded back into the leading channels of a fresh supernet.
    """
    widths = architecture.widths()
    out: dict[str, torch.Tensor] = {}
    c_in = net.spec.input_channels
    for layer in net.spec.layers:
        out_w = widths[layer.id]
        module = net.layers[layer.id]
        if layer.op_searchable:
            kind = architecture_kind(architecture.layer(layer.id))
            index = list(OperatorKind).index(kind)
            branch = module.branches[index]
            prefix = f"layers.{layer.id}.branches.{index}"
            for name, conv, ci, co in _branch_convs(branch, kind, c_in, out_w):
                out.update(_sliced_conv_tensors(f"{prefix}.{name}", conv, ci, co))
        else:
            prefix = f"layers.{layer.id}.conv"
            out.update(_sliced_conv_tensors(prefix, module.conv, c_in, out_w))
        c_in = out_w
    return out


def load_student_weights(
    net: GeneratorSupernet, architecture: Architecture, bundle: dict[str, torch.Tensor]
) -> None:
    """Copy a compact student bundle into the matching superkernel slices."""
    params = dict(net.named_parameters())
    with torch.no_grad():
        for name, tensor in bundle.items():
            param = params[name]
            index = tuple(slice(0, s) for s in tensor.shape)
            param[index] = tensor


def _branch_convs(branch: nn.Module, kind: OperatorKind, in_w: int, out_w: int):
    if kind in (OperatorKind.CONV1X1, OperatorKind.CONV3X3):
        yield "conv", branch.conv, in_w, out_w
    elif kind is OperatorKind.RESBLOCK:
        yield "conv1", branch.conv1, in_w, out_w
        yield "conv2", branch.conv2, out_w, out_w
        if in_w != out_w or branch.stride != 1:
            yield "project", branch.project, in_w, out_w
    else:
        yield "pw1", branch.pw1, in_w, out_w
        yield "dw", branch.dw, out_w, out_w
        yield "pw2", branch.pw2, out_w, out_w


def _sliced_conv_tensors(prefix: str, conv: SuperConv2d, in_w: int, out_w: int):
    weight = conv.slice_weight(in_w, out_w)
    yield f"{prefix}.weight", weight.detach().clone()
    if conv.bias is not None:
        yield f"{prefix}.bias", conv.bias[:out_w].detach().clone()
