"""Calibrated cost functions for the two vision kernels."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .runtime import ParallelEfficiency

# 640x480 at one PE in 100 ms
REFERENCE_PIXELS = 640 * 480
REFERENCE_FRAME_MS = 100.0


@dataclass(frozen=True)
class TfpModel:
    """Per-feature search time ``alpha + beta * leaves`` in milliseconds."""

    alpha: float = 0.05
    beta: float = 0.01

    def __post_init__(self):
        if not (self.alpha >= 0 and self.beta > 0):
            raise ValueError("need alpha >= 0 and beta > 0")
        if not (math.isfinite(self.alpha) and math.isfinite(self.beta)):
            raise ValueError("alpha and beta must be finite")

    def __call__(self, leaves: float) -> float:
        return self.alpha + self.beta * leaves


@dataclass(frozen=True)
class TimingModel:
    t_full_pixel_ms: float = REFERENCE_FRAME_MS / REFERENCE_PIXELS
    t_cr_pixel_ms: float = 0.25 * REFERENCE_FRAME_MS / REFERENCE_PIXELS
    tfp: TfpModel = field(default_factory=TfpModel)
    efficiency: ParallelEfficiency = field(default_factory=ParallelEfficiency)

    def __post_init__(self):
        if self.t_full_pixel_ms <= 0 or self.t_cr_pixel_ms < 0:
            raise ValueError("per-pixel costs must be positive")

    @classmethod
    def for_frame_cost(
        cls,
        pixels: int,
        full_frame_ms: float,
        cr_fraction: float = 0.25,
        **kwargs,
    ) -> "TimingModel":
        """Costs such that a ``pixels``-sized frame takes ``full_frame_ms`` on one PE."""
        t_full = full_frame_ms / pixels
        return cls(t_full_pixel_ms=t_full, t_cr_pixel_ms=cr_fraction * t_full, **kwargs)

    def harris_full_ms(self, pixels: int) -> float:
        return pixels * self.t_full_pixel_ms
