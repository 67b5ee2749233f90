"""Evaluation metrics and the line-oriented run log."""

from __future__ import annotations

import math
import os
from typing import Mapping

import torch

PSNR_CAP_DB = 99.0


def psnr(a: torch.Tensor, b: torch.Tensor, peak: float, cap: float = PSNR_CAP_DB) -> float:
    """Peak signal-to-noise ratio in decibels: 10*log10(peak^2 / MSE).

    Identical inputs (zero MSE) return ``cap``.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if peak <= 0:
        raise ValueError(f"peak must be positive, got {peak}")
    mse = (a.to(torch.float64) - b.to(torch.float64)).square().mean().item()
    if mse == 0.0:
        return cap
    return 10.0 * math.log10(peak * peak / mse)


def smoothed(values: list[float], window: int = 5) -> list[float]:
    """Trailing-window means, e.g. for loss curves."""
    out = []
    for i in range(len(values)):
        lo = max(0, i - window + 1)
        out.append(sum(values[lo : i + 1]) / (i + 1 - lo))
    return out


class MetricsLog:
    """Appends one ``key=value`` line per epoch to a versioned log file."""

    HEADER = "metrics-log 1"

    def __init__(self, path: str | os.PathLike):
        self.path = os.fspath(path)
        if not os.path.exists(self.path):
            with open(self.path, "w") as handle:
                handle.write(self.HEADER + "\n")

    def write(self, **fields) -> None:
        parts = []
        for key, value in fields.items():
            if isinstance(value, float):
                value = f"{value:.8g}"
            parts.append(f"{key}={value}")
        with open(self.path, "a") as handle:
            handle.write(" ".join(parts) + "\n")

    @staticmethod
    def read(path: str | os.PathLike) -> list[dict[str, str]]:
        with open(path) as handle:
            lines = handle.read().splitlines()
        if not lines or lines[0] != MetricsLog.HEADER:
            raise ValueError(f"{path}: not a metrics log")
        rows = []
        for line in lines[1:]:
            if not line.strip():
                continue
            row: dict[str, str] = {}
            for part in line.split():
                key, _, value = part.partition("=")
                row[key] = value
            rows.append(row)
        return rows
