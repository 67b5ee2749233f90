"""Post-training uniform affine quantization with memory accounting.

Per-tensor asymmetric scheme: ``q = clamp(round(x / scale) + zero_point, 0,
2^bits - 1)`` with ``scale = (max - min) / (2^bits - 1)``. A constant tensor
degenerates to ``scale = |c|`` (1 when the constant is 0) so its round trip is
exact. Activation quantization is simulated (quantize then dequantize); no
integer kernels are involved.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import torch

METADATA_BYTES_PER_TENSOR = 8  # float32 scale + int32 zero point


class QuantizeError(ValueError):
    pass


@dataclass
class QuantizedTensor:
    q: torch.Tensor  # uint8 storage
    scale: float
    zero_point: int
    shape: tuple[int, ...]

    def dequantize(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return (self.q.to(dtype) - self.zero_point) * self.scale


def quantize_tensor(x: torch.Tensor, bits: int = 8) -> QuantizedTensor:
    """Quantize a tensor to the given bit width (at most 8 for uint8 storage)."""
    if x.numel() == 0:
        raise QuantizeError("cannot quantize an empty tensor")
    if not torch.isfinite(x).all():
        raise QuantizeError("cannot quantize non-finite values")
    if not 1 <= bits <= 8:
        raise QuantizeError(f"bits must be in [1, 8], got {bits}")
    levels = (1 << bits) - 1
    lo = float(x.min())
    hi = float(x.max())
    if hi == lo:
        # Degenerate range: pick scale so dequantization reproduces the
        # constant exactly (q - zp is +-1 for nonzero constants).
        if lo == 0.0:
            scale, zero_point = 1.0, 0
        elif lo > 0.0:
            scale, zero_point = lo, 0
        else:
            scale, zero_point = -lo, 1
    else:
        scale = (hi - lo) / levels
        zero_point = int(round(-lo / scale))
    q = torch.clamp(torch.round(x.to(torch.float64) / scale) + zero_point, 0, levels)
    return QuantizedTensor(
        q=q.to(torch.uint8), scale=scale, zero_point=zero_point, shape=tuple(x.shape)
    )


def dequantize(qt: QuantizedTensor, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    return qt.dequantize(dtype).reshape(qt.shape)


def fake_quantize(x: torch.Tensor, bits: int | None = 8) -> torch.Tensor:
    """Quantize-then-dequantize; identity when ``bits`` is None."""
    if bits is None:
        return x
    return dequantize(quantize_tensor(x, bits)).to(x.dtype)


@dataclass(frozen=True)
class MemoryReport:
    tensor_count: int
    element_count: int
    float_bytes: int
    quantized_bytes: int

    @property
    def ratio(self) -> float:
        return self.quantized_bytes / self.float_bytes if self.float_bytes else 0.0

    def to_text(self) -> str:
        return (
            "memory-report 1\n"
            f"tensors {self.tensor_count}\n"
            f"elements {self.element_count}\n"
            f"float32_bytes {self.float_bytes}\n"
            f"quantized_bytes {self.quantized_bytes}\n"
            f"ratio {self.ratio:.4f}\n"
        )


def quantize_model(
    weights: Mapping[str, torch.Tensor], bits: int = 8
) -> tuple[dict[str, QuantizedTensor], MemoryReport]:
    """Quantize every tensor of a weight bundle per-tensor.

    The report compares float32 storage against 1-byte elements plus
    :data:`METADATA_BYTES_PER_TENSOR` per tensor for scale and zero point.
    """
    quantized: dict[str, QuantizedTensor] = {}
    elements = 0
    for name, tensor in weights.items():
        quantized[name] = quantize_tensor(tensor, bits)
        elements += tensor.numel()
    report = MemoryReport(
        tensor_count=len(quantized),
        element_count=elements,
        float_bytes=elements * 4,
        quantized_bytes=elements * 1 + METADATA_BYTES_PER_TENSOR * len(quantized),
    )
    return quantized, report


def dequantize_model(quantized: Mapping[str, QuantizedTensor]) -> dict[str, torch.Tensor]:
    return {name: dequantize(qt) for name, qt in quantized.items()}


def simulate_quantized_forward(
    student,
    quantized: Mapping[str, QuantizedTensor],
    x: torch.Tensor,
    bits: int | None = 8,
    quantize_activations: bool = True,
):
    """Run a derived student under simulated quantization.

    ``student`` is a :class:`~slimgan.supernet.DerivedGenerator`. Its weight
    slices are overwritten by the dequantized bundle and, when
    ``quantize_activations`` is set, every layer output passes through
    quantize-dequantize at the given bit width. ``bits=None`` disables the
    simulation entirely and reproduces the float forward bitwise.
    """
    from .supernet import load_student_weights

    transform = None
    if bits is not None:
        load_student_weights(student.net, student.architecture, dequantize_model(quantized))
        if quantize_activations:
            transform = lambda t: fake_quantize(t, bits)  # noqa: E731
    with torch.no_grad():
        return student(x, act_transform=transform)


def save_quantized(path, quantized: Mapping[str, QuantizedTensor], report: MemoryReport) -> None:
    """Store a quantized bundle in the tensor-container format."""
    from .checkpoint import save_checkpoint

    tensors: dict[str, torch.Tensor] = {}
    meta = {
        "kind": "quantized-weights",
        "tensors": str(report.tensor_count),
        "quantized_bytes": str(report.quantized_bytes),
        "float_bytes": str(report.float_bytes),
    }
    for name, qt in quantized.items():
        tensors[f"{name}.q"] = qt.q.reshape(qt.shape)
        tensors[f"{name}.scale"] = torch.tensor(qt.scale, dtype=torch.float64)
        tensors[f"{name}.zero_point"] = torch.tensor(qt.zero_point, dtype=torch.int64)
    save_checkpoint(path, tensors, meta)


def load_quantized(path) -> dict[str, QuantizedTensor]:
    from .checkpoint import load_checkpoint

    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "quantized-weights":
        raise QuantizeError(f"{path}: not a quantized weight bundle")
    out: dict[str, QuantizedTensor] = {}
    for name, tensor in tensors.items():
        if not name.endswith(".q"):
            continue
        base = name[:-2]
        out[base] = QuantizedTensor(
            q=tensor.reshape(-1),
            scale=float(tensors[f"{base}.scale"]),
            zero_point=int(tensors[f"{base}.zero_point"]),
            shape=tuple(tensor.shape),
        )
    return out
