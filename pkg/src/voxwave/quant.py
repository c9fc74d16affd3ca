"""Uniform scalar quantization of subband coefficients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError
from .nn import round_half_away, round_ste
from .transform import SubbandSet

SURROGATES = ("uniform_noise", "straight_through")


@dataclass
class QuantConfig:
    qs: float = 1.0
    train_surrogate: str = "uniform_noise"

    def __post_init__(self):
        if not self.qs > 0:
            raise ConfigError(f"quantization step must be positive, got {self.qs}")
        if self.train_surrogate not in SURROGATES:
            raise ConfigError(f"unknown surrogate {self.train_surrogate!r}")


def quantize_values(y: torch.Tensor, qs: float) -> torch.Tensor:
    """q = round(y / qs), halves away from zero."""
    return round_half_away(y / qs)


def dequantize_values(q: torch.Tensor, qs: float) -> torch.Tensor:
    return q * qs


def quantize(y: SubbandSet, cfg: QuantConfig) -> SubbandSet:
    return y.map(lambda t: quantize_values(t, cfg.qs))


def dequantize(q: SubbandSet, cfg: QuantConfig) -> SubbandSet:
    return q.map(lambda t: dequantize_values(t, cfg.qs))


def surrogate(y: SubbandSet, cfg: QuantConfig,
              generator: torch.Generator | None = None) -> SubbandSet:
    """Differentiable stand-in for quantize-dequantize during training."""
    if cfg.train_surrogate == "uniform_noise":
        def f(t):
            noise = torch.rand(t.shape, generator=generator, dtype=t.dtype)
            return t + (noise - 0.5) * cfg.qs
    else:
        def f(t):
            return round_ste(t / cfg.qs) * cfg.qs
    return y.map(f)


def quantize_array(y: np.ndarray, qs: float) -> np.ndarray:
    """Numpy flavour of :func:`quantize_values` (same rounding rule)."""
    return np.sign(y) * np.floor(np.abs(y) / qs + 0.5)
