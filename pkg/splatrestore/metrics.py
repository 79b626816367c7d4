"""
Image fidelity metrics and rate-distortion reporting.

Images are channel-last float tensors in [0, 1]: H x W x C, or B x H x W x C.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import pandas as pd
import torch
import torch.nn.functional as F

from .errors import InputError, NumericalError, ShapeError

logger = logging.getLogger(__name__)

Tensor = torch.Tensor

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_pair(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"images differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")


def psnr(a: Tensor, b: Tensor, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 99 dB for identical images."""
    _check_pair(a, b)
    mse = float((a.detach().double() - b.detach().double()).pow(2).mean())
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def _gaussian_window(dtype: torch.dtype) -> Tensor:
    coords = torch.arange(SSIM_WINDOW, dtype=torch.float64) - (SSIM_WINDOW - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2.0 * SSIM_SIGMA ** 2))
    g = g / g.sum()
    return torch.outer(g, g).to(dtype)


def ssim(a: Tensor, b: Tensor, peak: float = 1.0) -> Tensor:
    """Mean single-scale SSIM over valid 11 x 11 Gaussian windows (differentiable)."""
    _check_pair(a, b)
    if a.ndim == 3:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    if a.ndim != 4:
        raise ShapeError(f"expected H x W x C or B x H x W x C images, got {tuple(a.shape)}")
    x = a.permute(0, 3, 1, 2)
    y = b.permute(0, 3, 1, 2)
    channels, height, width = x.shape[1:]
    if min(height, width) < SSIM_WINDOW:
        raise InputError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {height}x{width}")

    window = _gaussian_window(x.dtype).expand(channels, 1, SSIM_WINDOW, SSIM_WINDOW)

    def blur(t: Tensor) -> Tensor:
        return F.conv2d(t, window, groups=channels)

    mu_x, mu_y = blur(x), blur(y)
    var_x = blur(x * x) - mu_x * mu_x
    var_y = blur(y * y) - mu_y * mu_y
    cov = blur(x * y) - mu_x * mu_y
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    numerator = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    denominator = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return (numerator / denominator).mean()


@dataclass
class RDReport:
    """Rate-distortion table, one row per (scene, level) plus a ``full`` reference row per scene."""

    rows: List[Dict[str, Any]] = field(default_factory=list)

    def add_row(self, **row: Any) -> None:
        self.rows.append(row)

    @property
    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows)

    @property
    def has_restored(self) -> bool:
        return any("psnr_restored" in row for row in self.rows)

    def validate(self) -> "RDReport":
        for row in self.rows:
            for key, value in row.items():
                if isinstance(value, float) and not math.isfinite(value):
                    raise NumericalError(f"non-finite {key} for scene {row.get('scene')} level {row.get('level')}",
                                         {"row": row})
        return self

    def aggregate(self) -> pd.DataFrame:
        """Mean of every numeric column per level."""
        frame = self.frame
        if frame.empty:
            return frame
        frame = frame.assign(level=frame["level"].astype(str)).drop(columns=["scene"])
        return frame.groupby("level", sort=False).mean(numeric_only=True).reset_index()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "rows": self.rows,
            "aggregate": json.loads(self.aggregate().to_json(orient="records")),
        }

    def to_json(self, path: Optional[Union[str, Path]] = None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    def to_csv(self, path: Union[str, Path]) -> None:
        self.frame.to_csv(path, index=False, float_format="%.6f")

    def to_text(self) -> str:
        aggregate = self.aggregate()
        if aggregate.empty:
            return "(empty report)"
        return aggregate.to_string(index=False, float_format=lambda v: f"{v:.4f}")
