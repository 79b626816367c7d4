"""
Uniform 8-bit quantization of primitive attributes, one scale per channel.

Channel order: 3 position, 4 rotation, 3 log-scale, 1 opacity logit, then
3 * (deg+1)^2 SH coefficients in colour-major order.
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np
import torch

from splatrestore.errors import InputError
from splatrestore.scene import GaussianSet, sh_coefficient_count

LEVELS = 256


def channel_count(sh_degree: int) -> int:
    return 3 + 4 + 3 + 1 + 3 * sh_coefficient_count(sh_degree)


@dataclass(frozen=True, eq=False)
class QuantParams:
    """Per-channel dequantization ``value = min + symbol * step`` (float32 parameters)."""

    mins: np.ndarray
    steps: np.ndarray
    bits: int = 8

    def __post_init__(self):
        object.__setattr__(self, "mins", np.asarray(self.mins, dtype=np.float32))
        object.__setattr__(self, "steps", np.asarray(self.steps, dtype=np.float32))
        if self.mins.shape != self.steps.shape or self.mins.ndim != 1:
            raise InputError(f"mins {self.mins.shape} and steps {self.steps.shape} must be equal 1-D")
        if not bool((self.steps > 0).all()):
            raise InputError("quantization steps must be positive")

    @property
    def channels(self) -> int:
        return int(self.mins.shape[0])


def to_channels(gs: GaussianSet) -> np.ndarray:
    """(C, N) float32 matrix of every attribute channel."""
    n = gs.count
    parts = [
        gs.positions, gs.rotations, gs.log_scales, gs.opacity_logits,
        gs.sh_coeffs.reshape(n, -1),
    ]
    stacked = torch.cat([p.detach().to(torch.float32).reshape(n, -1) for p in parts], dim=1)
    return np.ascontiguousarray(stacked.cpu().numpy().T)


def from_channels(channels: np.ndarray, sh_degree: int) -> GaussianSet:
    expected = channel_count(sh_degree)
    if channels.shape[0] != expected:
        raise InputError(f"{channels.shape[0]} channels, SH degree {sh_degree} needs {expected}")
    values = torch.from_numpy(np.ascontiguousarray(channels.T, dtype=np.float32))
    n = values.shape[0]
    return GaussianSet(
        positions=values[:, 0:3].contiguous(),
        rotations=values[:, 3:7].contiguous(),
        log_scales=values[:, 7:10].contiguous(),
        opacity_logits=values[:, 10:11].contiguous(),
        sh_coeffs=values[:, 11:].reshape(n, 3, sh_coefficient_count(sh_degree)).contiguous(),
        sh_degree=sh_degree,
    )


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_channels(channels: np.ndarray) -> Tuple[np.ndarray, QuantParams]:
    """Quantize a (C, N) matrix to uint8 symbols.

    A constant channel gets step 1 and all-zero symbols.
    """
    values = np.asarray(channels, dtype=np.float32).astype(np.float64)
    if not np.isfinite(values).all():
        raise InputError("cannot quantize non-finite attribute values")
    mins = values.min(axis=1)
    maxs = values.max(axis=1)
    span = maxs - mins
    constant = span <= 0
    safe_span = np.where(constant, 1.0, span)
    ratio = (values - mins[:, None]) * (LEVELS - 1) / safe_span[:, None]
    symbols = np.clip(_round_half_away(ratio), 0, LEVELS - 1)
    symbols[constant] = 0
    steps = np.where(constant, 1.0, span / (LEVELS - 1))
    return symbols.astype(np.uint8), QuantParams(mins=mins, steps=steps)


def dequantize_channels(symbols: np.ndarray, params: QuantParams) -> np.ndarray:
    if symbols.shape[0] != params.channels:
        raise InputError(f"{symbols.shape[0]} symbol channels but {params.channels} parameters")
    mins = params.mins.astype(np.float64)[:, None]
    steps = params.steps.astype(np.float64)[:, None]
    return (mins + symbols.astype(np.float64) * steps).astype(np.float32)


def quantize(gs: GaussianSet) -> Tuple[np.ndarray, QuantParams]:
    return quantize_channels(to_channels(gs))


def dequantize(symbols: np.ndarray, params: QuantParams, sh_degree: int) -> GaussianSet:
    return from_channels(dequantize_channels(symbols, params), sh_degree)
