"""
Differentiable Gaussian rasterizer.

Primitives are projected, sorted front to back by camera depth and alpha
composited per pixel. The image is processed in square tiles; a primitive only
enters a tile when its alpha could reach ``alpha_min`` somewhere inside it, so
tiling never changes the result. Gradients come from autograd through the
compositing arithmetic, for every attribute of the primitive set.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import torch

from .errors import InputError, ShapeError
from .metrics import ssim
from .scene import Camera, GaussianSet, primitive_colors, project_gaussians

logger = logging.getLogger(__name__)

Tensor = torch.Tensor


@dataclass(frozen=True)
class RasterSettings:
    """Compositing thresholds.

    Finite-difference checks relax ``alpha_min`` and ``transmittance_min`` to 0
    so that no hard cut-off sits inside the perturbation interval.
    """

    alpha_min: float = 1.0 / 255.0
    alpha_max: float = 0.99
    transmittance_min: float = 1e-4
    lowpass: float = 0.3
    tile_size: int = 16

    def __post_init__(self):
        if not 0.0 <= self.alpha_min < self.alpha_max <= 1.0:
            raise InputError(f"need 0 <= alpha_min < alpha_max <= 1, got {self.alpha_min}, {self.alpha_max}")
        if self.tile_size < 1:
            raise InputError(f"tile_size must be positive, got {self.tile_size}")

    @classmethod
    def from_config(cls, config) -> "RasterSettings":
        return cls(alpha_min=config.alpha_min, alpha_max=config.alpha_max,
                   transmittance_min=config.transmittance_min, lowpass=config.lowpass,
                   tile_size=config.tile_size)


@dataclass(eq=False)
class RenderOutput:
    """Rendered image (H x W x 3), accumulated alpha (H x W) and optional gradients."""

    image: Tensor
    alpha: Tensor
    gradients: Optional[Dict[str, Tensor]] = None
    loss: Optional[float] = None


def _as_background(background, dtype: torch.dtype) -> Tensor:
    bg = torch.as_tensor(background, dtype=dtype).reshape(-1)
    if bg.numel() != 3:
        raise ShapeError(f"background must hold 3 values, got shape {tuple(bg.shape)}")
    return bg


def _culling_radius(cov2d: Tensor, opacities: Tensor, alpha_min: float) -> Tensor:
    """Distance beyond which a primitive's alpha stays below ``alpha_min``.

    Uses the largest eigenvalue of the screen covariance, so the bound is exact
    along the major axis and conservative elsewhere.
    """
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    mid = 0.5 * (a + c)
    lam_max = mid + torch.sqrt(torch.clamp(mid * mid - (a * c - b * b), min=0.0))
    if alpha_min <= 0.0:
        return torch.full_like(a, math.inf)
    ratio = opacities / alpha_min
    radius = torch.sqrt(2.0 * lam_max * torch.log(torch.clamp(ratio, min=1.0)))
    return torch.where(ratio >= 1.0, radius, torch.full_like(radius, -math.inf))


def _composite_tile(pixels: Tensor, means: Tensor, conics: Tensor, opacities: Tensor, colors: Tensor,
                    background: Tensor, settings: RasterSettings):
    """Composite the (already depth sorted) primitives over a block of pixels.

    Returns:
        colour (P, 3) and final transmittance (P,)
    """
    d = pixels.unsqueeze(0) - means.unsqueeze(1)
    dx, dy = d[..., 0], d[..., 1]
    power = -0.5 * (conics[:, 0:1] * dx * dx + 2.0 * conics[:, 1:2] * dx * dy + conics[:, 2:3] * dy * dy)
    alpha = torch.clamp(opacities.unsqueeze(1) * torch.exp(power), max=settings.alpha_max)
    alpha = torch.where(alpha >= settings.alpha_min, alpha, torch.zeros_like(alpha))

    if settings.transmittance_min > 0.0:
        with torch.no_grad():
            keep = torch.cumprod(1.0 - alpha, dim=0) >= settings.transmittance_min
        alpha = alpha * keep

    survive = torch.cumprod(1.0 - alpha, dim=0)
    transmittance = torch.cat([torch.ones_like(survive[:1]), survive[:-1]], dim=0)
    weights = alpha * transmittance
    color = weights.transpose(0, 1) @ colors
    final_t = survive[-1]
    return color + final_t.unsqueeze(1) * background, final_t


def render(gs: GaussianSet, cam: Camera, background=(0.0, 0.0, 0.0), with_grad: bool = False,
           settings: Optional[RasterSettings] = None) -> RenderOutput:
    """Render ``gs`` from ``cam``.

    Args:
        gs: Primitive set; its dtype sets the compositing precision
        cam: Camera
        background: RGB background colour
        with_grad: Keep the autograd graph so the image can be differentiated
        settings: Compositing thresholds (production defaults when omitted)

    Returns:
        RenderOutput with image H x W x 3 and alpha H x W.
    """
    settings = settings or RasterSettings()
    with torch.set_grad_enabled(with_grad):
        return _render(gs, cam, _as_background(background, gs.dtype), settings)


def _render(gs: GaussianSet, cam: Camera, background: Tensor, settings: RasterSettings) -> RenderOutput:
    H, W = cam.height, cam.width
    dtype = gs.dtype
    if gs.count == 0:
        return RenderOutput(image=background.expand(H, W, 3).clone(), alpha=torch.zeros(H, W, dtype=dtype))

    screen = project_gaussians(gs, cam, settings.lowpass)
    opacities = gs.opacities.squeeze(1)
    colors = primitive_colors(gs, cam)

    cov = screen.cov2d
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0]
    conics = torch.stack([cov[:, 1, 1] / det, -cov[:, 0, 1] / det, cov[:, 0, 0] / det], dim=-1)

    with torch.no_grad():
        radius = _culling_radius(cov, opacities, settings.alpha_min) + 1.0
        candidate = screen.visible & (det > 0)
        order = torch.sort(screen.depths.detach(), stable=True).indices
        mx, my = screen.means2d[:, 0].detach(), screen.means2d[:, 1].detach()

    ts = settings.tile_size
    rows: List[Tensor] = []
    alpha_rows: List[Tensor] = []
    for y0 in range(0, H, ts):
        y1 = min(y0 + ts, H)
        tiles: List[Tensor] = []
        alpha_tiles: List[Tensor] = []
        for x0 in range(0, W, ts):
            x1 = min(x0 + ts, W)
            with torch.no_grad():
                overlap = (candidate & (mx + radius >= x0) & (mx - radius <= x1 - 1)
                           & (my + radius >= y0) & (my - radius <= y1 - 1))
                index = order[overlap[order]]
            if index.numel() == 0:
                tiles.append(background.expand(y1 - y0, x1 - x0, 3))
                alpha_tiles.append(torch.zeros(y1 - y0, x1 - x0, dtype=dtype))
                continue
            ys, xs = torch.meshgrid(torch.arange(y0, y1, dtype=dtype), torch.arange(x0, x1, dtype=dtype),
                                    indexing="ij")
            pixels = torch.stack([xs.reshape(-1), ys.reshape(-1)], dim=-1)
            color, final_t = _composite_tile(pixels, screen.means2d[index], conics[index], opacities[index],
                                             colors[index], background, settings)
            tiles.append(color.reshape(y1 - y0, x1 - x0, 3))
            alpha_tiles.append((1.0 - final_t).reshape(y1 - y0, x1 - x0))
        rows.append(torch.cat(tiles, dim=1))
        alpha_rows.append(torch.cat(alpha_tiles, dim=1))
    return RenderOutput(image=torch.cat(rows, dim=0), alpha=torch.cat(alpha_rows, dim=0))


def rendering_loss(image: Tensor, target: Tensor, lambda_ssim: float = 0.2) -> Tensor:
    """L1 + lambda * (1 - SSIM), the usual splatting training loss."""
    if image.shape != target.shape:
        raise ShapeError(f"render {tuple(image.shape)} and target {tuple(target.shape)} differ")
    loss = (image - target).abs().mean()
    if lambda_ssim > 0.0:
        loss = loss + lambda_ssim * (1.0 - ssim(image, target))
    return loss


def render_backward(gs: GaussianSet, cam: Camera, target: Tensor, background=(0.0, 0.0, 0.0),
                    lambda_ssim: float = 0.2, settings: Optional[RasterSettings] = None) -> RenderOutput:
    """Render and differentiate the rendering loss w.r.t. every attribute.

    Returns:
        RenderOutput whose ``gradients`` maps attribute name to a tensor shaped like it.

    Raises:
        ShapeError: ``target`` does not match the camera resolution
    """
    expected = (cam.height, cam.width, 3)
    if tuple(target.shape) != expected:
        raise ShapeError(f"target has shape {tuple(target.shape)}, render has {expected}")
    leaves = gs.with_grad()
    out = render(leaves, cam, background, with_grad=True, settings=settings)
    loss = rendering_loss(out.image, target.to(gs.dtype), lambda_ssim)
    attributes = leaves.attributes()
    grads = torch.autograd.grad(loss, list(attributes.values()), allow_unused=True)
    out.gradients = {
        name: (g if g is not None else torch.zeros_like(value))
        for (name, value), g in zip(attributes.items(), grads)
    }
    out.loss = float(loss.detach())
    out.image = out.image.detach()
    out.alpha = out.alpha.detach()
    return out


def primitive_saliency(gs: GaussianSet, views: Sequence[Camera], targets: Sequence[Tensor],
                       background=(0.0, 0.0, 0.0), lambda_ssim: float = 0.2,
                       settings: Optional[RasterSettings] = None) -> Tensor:
    """Per-primitive L2 norm of all attribute gradients, summed over views."""
    if not views:
        raise InputError("primitive_saliency needs at least one view")
    if len(views) != len(targets):
        raise InputError(f"{len(views)} views but {len(targets)} targets")
    scores = torch.zeros(gs.count, dtype=torch.float64)
    for cam, target in zip(views, targets):
        grads = render_backward(gs, cam, target, background, lambda_ssim, settings).gradients
        squared = sum(g.detach().double().reshape(gs.count, -1).pow(2).sum(dim=1) for g in grads.values())
        scores += torch.sqrt(squared)
    return scores


def render_views(gs: GaussianSet, views: Sequence[Camera], background=(0.0, 0.0, 0.0),
                 settings: Optional[RasterSettings] = None) -> List[Tensor]:
    """Render every view without gradients."""
    return [render(gs, cam, background, settings=settings).image for cam in views]
