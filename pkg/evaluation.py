"""
Rate-distortion evaluation across the codec and the restorer.

Every scene is compressed once through the level cascade. Its held-out views
are rendered from each coded level and compared against the full model, then
optionally restored and compared again.
"""

import logging
from dataclasses import dataclass, replace
from typing import Any, Dict, Optional, Sequence

import torch

from compression import CompressOptions, compress_levels, level_schedule, uncompressed_bytes
from restoration.dataset import condition_for
from restoration.diffusion import (DiffusionSchedule, decode_latents, encode_latents, img2img_restore,
                                   one_step_restore)
from restoration.distill import perceptual
from splatrestore.errors import InputError
from splatrestore.metrics import RDReport, psnr, ssim
from splatrestore.raster import RasterSettings, render_views
from splatrestore.scene import SceneBundle

logger = logging.getLogger(__name__)

Tensor = torch.Tensor


@dataclass
class EvaluationOptions:
    """How ``rd_evaluate`` compresses and restores."""

    c_min: int = 256
    levels: int = 3
    compress: Optional[CompressOptions] = None
    t0: int = 199
    cfg_scale: float = 7.5
    seed: int = 0
    vocab_size: int = 16
    img2img_steps: int = 0
    settings: Optional[RasterSettings] = None


def image_metrics(prefix: str, images: Sequence[Tensor], references: Sequence[Tensor]) -> Dict[str, float]:
    """Mean PSNR, SSIM and perceptual proxy of ``images`` against ``references``, keyed by ``prefix``."""
    psnrs = [psnr(x, ref) for x, ref in zip(images, references)]
    ssims = [float(ssim(x, ref)) for x, ref in zip(images, references)]
    stacked = torch.stack([x.permute(2, 0, 1) for x in images])
    stacked_ref = torch.stack([ref.permute(2, 0, 1) for ref in references])
    percs = perceptual(stacked_ref, stacked, reduction="none").tolist()
    return {
        f"psnr_{prefix}": sum(psnrs) / len(psnrs),
        f"ssim_{prefix}": sum(ssims) / len(ssims),
        f"perc-proxy_{prefix}": sum(percs) / len(percs),
    }


def _restore_variants(restorer: Any, degraded: Sequence[Tensor], condition: int, generator: torch.Generator,
                      options: EvaluationOptions) -> Dict[str, Tensor]:
    latents = encode_latents(torch.stack(list(degraded)))
    conditions = torch.full((latents.shape[0],), condition, dtype=torch.long)
    noise = torch.randn(latents.shape, generator=generator, dtype=latents.dtype)
    schedule = getattr(restorer, "schedule", None) or DiffusionSchedule()
    with torch.no_grad():
        variants = {
            "restored": one_step_restore(restorer, latents, noise, conditions, options.cfg_scale, t0=options.t0),
            "restored_no_t0": one_step_restore(restorer, latents, noise, conditions, options.cfg_scale,
                                               t0=schedule.T),
        }
        if options.img2img_steps > 0:
            variants["img2img"] = img2img_restore(restorer, latents, noise, conditions, options.cfg_scale,
                                                  t0=options.t0, steps=options.img2img_steps)
    return variants


def rd_evaluate(scenes: Sequence[SceneBundle], restorer: Any = None, levels: Optional[Sequence[int]] = None,
                options: Optional[EvaluationOptions] = None) -> RDReport:
    """Compress every scene, render its held-out views and tabulate distortion per level.

    Args:
        scenes: SceneBundles with test views
        restorer: Anything with ``velocity(which, x_t, t, condition)``; ``None``
            reports degraded images only
        levels: Levels to report (all levels when omitted)
        options: Compression and restoration parameters

    Returns:
        Validated RDReport.
    """
    options = options or EvaluationOptions()
    compress_options = options.compress or CompressOptions(settings=options.settings)
    levels = sorted(set(levels)) if levels is not None else list(range(options.levels))
    report = RDReport()

    for scene_index, bundle in enumerate(scenes):
        scene_id = int(bundle.metadata.get("scene_id", scene_index))
        if not bundle.test_views:
            raise InputError(f"scene {scene_id} has no test views to evaluate")
        gs = bundle.gaussians
        background = bundle.background
        clean = render_views(gs, bundle.test_views, background, options.settings)
        train_targets = render_views(gs, bundle.train_views, background, options.settings)
        schedule = level_schedule(gs.count, min(options.c_min, gs.count), options.levels)
        scene_options = replace(compress_options, background=background)
        coded = compress_levels(gs, schedule, bundle.train_views, train_targets, scene_options,
                                lowest_level=min(levels))
        full_bytes = uncompressed_bytes(gs)
        report.add_row(scene=scene_id, level="full", primitives=gs.count, bytes=full_bytes,
                       compression_ratio=1.0)

        condition = condition_for(scene_id, options.vocab_size)
        for level in levels:
            size = coded[level].size_bytes
            degraded = render_views(coded[level].gaussians(), bundle.test_views, background, options.settings)
            row: Dict[str, Any] = {
                "scene": scene_id, "level": level, "primitives": coded[level].count,
                "bytes": size, "compression_ratio": full_bytes / size,
            }
            row.update(image_metrics("degraded", degraded, clean))

            if restorer is not None:
                generator = torch.Generator().manual_seed(options.seed * 1000 + scene_id * 10 + level)
                for name, restored in _restore_variants(restorer, degraded, condition, generator, options).items():
                    row.update(image_metrics(name, list(decode_latents(restored)), clean))
            report.add_row(**row)
            logger.info(f"Scene {scene_id} level {level}: {size} bytes, "
                        f"degraded PSNR {row['psnr_degraded']:.2f} dB")
    return report.validate()
