"""Analytical compute-cost model and the differentiable budget objective.

Conventions, applied uniformly and stated in every report:

* one multiply-accumulate counts as one FLOP;
* a conv with stride ``s`` runs at ``ceil(h/s) x ceil(w/s)`` output positions
  and costs ``k^2 * c_in * c_out`` per position (padding taps included);
* a stride-2 transposed conv is charged at its doubled output resolution,
  as is a conv preceded by a bilinear 2x upsample;
* normalization, biases, activations, interpolation and skip additions are
  free.

The expected-cost terms treat the operator distribution and the width
distribution as independent categorical variables per layer. Each term severs
the gradient to the conditioned parameter (``expected_flops_alpha`` sees the
width probabilities as constants and vice versa), so the two terms can be
weighted differently without cross-talk.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import torch

from .search_space import (
    Architecture,
    ConvOp,
    OperatorKind,
    SupernetSpec,
    architecture_kind,
    validate_architecture,
)


class BudgetError(ValueError):
    pass


def _conv_flops(kernel: int, c_in: int, c_out: int, h_out: int, w_out: int) -> int:
    return kernel * kernel * c_in * c_out * h_out * w_out


def op_output_hw(kind: "OperatorKind | ConvOp", h: int, w: int, stride: int = 1) -> tuple[int, int]:
    """Output spatial size of an operator applied at (h, w)."""
    if isinstance(kind, ConvOp) and (kind.transposed or kind.pre_upsample):
        return 2 * h, 2 * w
    return -(-h // stride), -(-w // stride)


def op_flops(kind: "OperatorKind | ConvOp", c_in: int, c_out: int, h: int, w: int, stride: int = 1) -> int:
    """Multiply-accumulate count of one operator instance.

    ``h`` and ``w`` are the input spatial dimensions. Composite operators sum
    their constituent convolutions; the residual block includes a 1x1
    projection on its skip path only when the channel count changes.
    """
    if c_in <= 0 or c_out <= 0 or h <= 0 or w <= 0:
        raise BudgetError("dimensions must be positive")
    if stride not in (1, 2):
        raise BudgetError(f"stride must be 1 or 2, got {stride}")
    ho, wo = op_output_hw(kind, h, w, stride)
    if isinstance(kind, ConvOp):
        if (kind.transposed or kind.pre_upsample) and stride != 1:
            raise BudgetError("upsampling convs take stride 1")
        return _conv_flops(kind.kernel_size, c_in, c_out, ho, wo)
    if kind is OperatorKind.CONV1X1:
        return _conv_flops(1, c_in, c_out, ho, wo)
    if kind is OperatorKind.CONV3X3:
        return _conv_flops(3, c_in, c_out, ho, wo)
    if kind is OperatorKind.RESBLOCK:
        total = _conv_flops(3, c_in, c_out, ho, wo) + _conv_flops(3, c_out, c_out, ho, wo)
        if c_in != c_out:
            total += _conv_flops(1, c_in, c_out, ho, wo)
        return total
    if kind is OperatorKind.DWSBLOCK:
        total = _conv_flops(1, c_in, c_out, ho, wo)
        total += 3 * 3 * c_out * ho * wo
        total += _conv_flops(1, c_out, c_out, ho, wo)
        return total
    raise BudgetError(f"unknown operator kind {kind!r}")


def op_params(kind: "OperatorKind | ConvOp", c_in: int, c_out: int) -> int:
    """Parameter count (weights plus biases) of one operator instance."""
    def conv(k: int, ci: int, co: int) -> int:
        return k * k * ci * co + co

    if isinstance(kind, ConvOp):
        return conv(kind.kernel_size, c_in, c_out)
    if kind is OperatorKind.CONV1X1:
        return conv(1, c_in, c_out)
    if kind is OperatorKind.CONV3X3:
        return conv(3, c_in, c_out)
    if kind is OperatorKind.RESBLOCK:
        total = conv(3, c_in, c_out) + conv(3, c_out, c_out)
        if c_in != c_out:
            total += conv(1, c_in, c_out)
        return total
    if kind is OperatorKind.DWSBLOCK:
        return conv(1, c_in, c_out) + (3 * 3 * c_out + c_out) + conv(1, c_out, c_out)
    raise BudgetError(f"unknown operator kind {kind!r}")


@dataclass(frozen=True)
class LayerCost:
    layer_id: str
    op: str
    c_in: int
    c_out: int
    h_out: int
    w_out: int
    flops: int


@dataclass(frozen=True)
class FlopsReport:
    """Per-layer cost breakdown of a concrete architecture."""

    task: str
    input_h: int
    input_w: int
    per_layer: tuple[LayerCost, ...]
    total: int
    params: int

    @property
    def gflops(self) -> float:
        return self.total / 1e9

    def to_text(self) -> str:
        lines = [
            "flops-report 1",
            "convention 1 MAC = 1 FLOP; norm/bias/activation/skip-add free;"
            " transposed and upsampled convs charged at output resolution",
            f"task {self.task}",
            f"input {self.input_h}x{self.input_w}",
            "",
            f"{'layer':<12} {'op':<10} {'in':>5} {'out':>5} {'h_out':>6} {'w_out':>6} {'flops':>16}",
        ]
        for row in self.per_layer:
            lines.append(
                f"{row.layer_id:<12} {row.op:<10} {row.c_in:>5} {row.c_out:>5}"
                f" {row.h_out:>6} {row.w_out:>6} {row.flops:>16,}"
            )
        lines += [
            "",
            f"total {self.total:,} FLOPs ({self.gflops:.4f} GFLOPs)",
            f"params {self.params:,}",
        ]
        return "\n".join(lines) + "\n"


def derived_flops(spec: SupernetSpec, arch: Architecture, input_h: int, input_w: int) -> FlopsReport:
    """Exact cost of a concrete architecture at the given input resolution."""
    validate_architecture(arch, spec)
    if input_h <= 0 or input_w <= 0:
        raise BudgetError("input resolution must be positive")
    c_in = spec.input_channels
    h, w = input_h, input_w
    rows = []
    total = 0
    params = 0
    for layer, choice in zip(spec.layers, arch.layers):
        kind = layer.op if layer.op is not None else architecture_kind(choice)
        c_out = choice.width
        flops = op_flops(kind, c_in, c_out, h, w, layer.stride)
        params += op_params(kind, c_in, c_out)
        h, w = op_output_hw(kind, h, w, layer.stride)
        rows.append(LayerCost(layer.id, choice.op, c_in, c_out, h, w, flops))
        total += flops
        c_in = c_out
    return FlopsReport(spec.task, input_h, input_w, tuple(rows), total, params)


@lru_cache(maxsize=16)
def _layer_tables(
    spec: SupernetSpec, input_h: int, input_w: int
) -> tuple[tuple[object, tuple, tuple[int, ...], tuple[int, ...], torch.Tensor], ...]:
    """Per layer: (spec layer, kinds, in widths, out widths, cost table).

    The cost table has shape ``[kinds, in widths, out widths]`` in float64;
    entries are exact (integer-valued) MAC counts.
    """
    tables = []
    in_widths: tuple[int, ...] = (spec.input_channels,)
    h, w = input_h, input_w
    for layer in spec.layers:
        kinds = (layer.op,) if layer.op is not None else tuple(OperatorKind)
        out_widths = layer.width_candidates()
        table = torch.empty((len(kinds), len(in_widths), len(out_widths)), dtype=torch.float64)
        for a, kind in enumerate(kinds):
            for i, ci in enumerate(in_widths):
                for j, co in enumerate(out_widths):
                    table[a, i, j] = float(op_flops(kind, ci, co, h, w, layer.stride))
        tables.append((layer, kinds, in_widths, out_widths, table))
        h, w = op_output_hw(kinds[0], h, w, layer.stride)
        in_widths = out_widths
    return tuple(tables)


def _probs(logits: torch.Tensor | None, n: int, detach: bool) -> torch.Tensor:
    if logits is None:
        if n != 1:
            raise BudgetError("missing logits for a searchable slot")
        return torch.ones(1, dtype=torch.float64)
    if not torch.isfinite(logits).all():
        raise BudgetError("non-finite architecture logits")
    p = torch.softmax(logits, dim=-1).to(torch.float64)
    return p.detach() if detach else p


def _expected_flops(
    spec: SupernetSpec,
    alpha: dict[str, torch.Tensor],
    gamma: dict[str, torch.Tensor],
    input_h: int,
    input_w: int,
    *,
    grad_through: str,
) -> torch.Tensor:
    detach_alpha = grad_through != "alpha"
    detach_gamma = grad_through != "gamma"
    total = torch.zeros((), dtype=torch.float64)
    prev_q: torch.Tensor | None = None
    for layer, kinds, in_widths, out_widths, table in _layer_tables(spec, input_h, input_w):
        q_in = prev_q if prev_q is not None else torch.ones(len(in_widths), dtype=torch.float64)
        p_op = _probs(
            alpha.get(layer.id) if layer.op_searchable else None,
            len(kinds),
            detach_alpha,
        )
        q_out = _probs(
            gamma.get(layer.id) if layer.width_searchable else None,
            len(out_widths),
            detach_gamma,
        )
        per_kind = torch.einsum("i,kij,j->k", q_in, table, q_out)
        total = total + (p_op * per_kind).sum()
        prev_q = q_out
    return total


def expected_flops_alpha(
    spec: SupernetSpec,
    alpha: dict[str, torch.Tensor],
    gamma: dict[str, torch.Tensor],
    input_h: int,
    input_w: int,
) -> torch.Tensor:
    """Expected cost, differentiable in the operator logits only.

    Width probabilities enter as constants: no gradient reaches ``gamma``
    through this term.
    """
    return _expected_flops(spec, alpha, gamma, input_h, input_w, grad_through="alpha")


def expected_flops_gamma(
    spec: SupernetSpec,
    alpha: dict[str, torch.Tensor],
    gamma: dict[str, torch.Tensor],
    input_h: int,
    input_w: int,
) -> torch.Tensor:
    """Expected cost, differentiable in the width logits only."""
    return _expected_flops(spec, alpha, gamma, input_h, input_w, grad_through="gamma")


@dataclass
class BudgetConfig:
    """Weights and bounds of the budget objective.

    ``omega1`` weights the operator-aware expected-cost term, ``omega2`` the
    width-aware one; they must sum to 1. The controller doubles the trade-off
    factor when the derived architecture's exact cost exceeds ``flops_upper``
    and halves it below ``flops_lower``, clamped to ``[lambda_min, lambda_max]``.
    """

    lambda0: float
    omega1: float
    omega2: float
    flops_lower: float
    flops_upper: float
    check_interval: int = 1
    lambda_min: float | None = None
    lambda_max: float | None = None

    def __post_init__(self) -> None:
        if self.lambda0 < 0:
            raise BudgetError("lambda0 must be non-negative")
        if not (0.0 <= self.omega1 <= 1.0 and 0.0 <= self.omega2 <= 1.0):
            raise BudgetError("omega weights must lie in [0, 1]")
        if abs(self.omega1 + self.omega2 - 1.0) > 1e-9:
            raise BudgetError("omega1 + omega2 must equal 1")
        if not self.flops_lower < self.flops_upper:
            raise BudgetError("flops_lower must be below flops_upper")
        if self.check_interval < 1:
            raise BudgetError("check_interval must be at least 1")
        if self.lambda_min is None:
            self.lambda_min = self.lambda0 / 1024.0
        if self.lambda_max is None:
            self.lambda_max = self.lambda0 * 1024.0


TRANSLATION_BUDGET_DEFAULTS = dict(lambda0=1e-17, omega1=0.25, omega2=0.75)
SR_BUDGET_DEFAULTS = dict(lambda0=1e-12, omega1=2.0 / 7.0, omega2=5.0 / 7.0)


def budget_term(
    spec: SupernetSpec,
    alpha: dict[str, torch.Tensor],
    gamma: dict[str, torch.Tensor],
    cfg: BudgetConfig,
    lambda_value: float,
    input_h: int,
    input_w: int,
) -> torch.Tensor:
    """The full budget penalty: lambda * (w1 * F_ops + w2 * F_widths)."""
    if lambda_value == 0.0:
        return torch.zeros((), dtype=torch.float64)
    fa = expected_flops_alpha(spec, alpha, gamma, input_h, input_w)
    fg = expected_flops_gamma(spec, alpha, gamma, input_h, input_w)
    return lambda_value * (cfg.omega1 * fa + cfg.omega2 * fg)


@dataclass
class LambdaController:
    """Doubling/halving controller for the budget trade-off factor."""

    cfg: BudgetConfig
    value: float = field(init=False)
    history: list[tuple[float, float]] = field(init=False, default_factory=list)

    def __post_init__(self) -> None:
        self.value = self.cfg.lambda0

    def update(self, derived_total: float) -> float:
        """Adjust after observing the derived architecture's exact cost."""
        new = self.value
        if derived_total > self.cfg.flops_upper:
            new = self.value * 2.0
        elif derived_total < self.cfg.flops_lower:
            new = self.value / 2.0
        new = min(max(new, self.cfg.lambda_min), self.cfg.lambda_max)
        self.value = new
        self.history.append((derived_total, new))
        return new
