"""
Variable-rate compression of a Gaussian scene.

Levels are produced coarse-to-fine in one pass starting from the full model:
for each level from the highest rate down, saliency is recomputed on the
current model, the lowest-scoring primitives are pruned to the level's
cardinality, the survivors are fine-tuned, and the result is quantized and
entropy coded. Each level is therefore derived from the one above it.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Sequence

import torch

from splatrestore.errors import InputError
from splatrestore.raster import RasterSettings, primitive_saliency
from splatrestore.scene import Camera, GaussianSet

from .coded_scene import CodedScene
from .pruning import DEFAULT_LEARNING_RATES, finetune, prune
from .schedule import LevelSchedule

logger = logging.getLogger(__name__)


@dataclass
class CompressOptions:
    """Knobs shared by every level of the cascade."""

    finetune_iters: int = 200
    learning_rates: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_LEARNING_RATES))
    seed: int = 0
    background: Sequence[float] = (0.0, 0.0, 0.0)
    lambda_ssim: float = 0.2
    settings: Optional[RasterSettings] = None


def uncompressed_bytes(gs: GaussianSet) -> int:
    """Size of the full model stored as raw float32 attributes."""
    return 4 * sum(t.numel() for t in gs.attributes().values())


def compress_levels(gs: GaussianSet, schedule: LevelSchedule, views: Sequence[Camera],
                    targets: Sequence[torch.Tensor], options: Optional[CompressOptions] = None,
                    lowest_level: int = 0) -> Dict[int, CodedScene]:
    """Run the cascade from the top level down to ``lowest_level``.

    Returns:
        Mapping level -> CodedScene for every level in [lowest_level, L-1].
    """
    options = options or CompressOptions()
    if not 0 <= lowest_level < schedule.levels:
        raise InputError(f"level {lowest_level} outside 0..{schedule.levels - 1}")
    if len(views) != len(targets):
        raise InputError(f"{len(views)} views but {len(targets)} targets")

    coded: Dict[int, CodedScene] = {}
    current = gs
    for level in range(schedule.levels - 1, lowest_level - 1, -1):
        keep = min(schedule[level], current.count)
        if keep < current.count:
            if not views:
                raise InputError("pruning needs at least one training view")
            scores = primitive_saliency(current, views, targets, options.background,
                                        options.lambda_ssim, options.settings)
            current = prune(current, scores, keep)
            current = finetune(current, views, targets, options.finetune_iters, options.learning_rates,
                               seed=options.seed + level, background=options.background,
                               lambda_ssim=options.lambda_ssim, settings=options.settings)
        coded[level] = CodedScene.encode(current, level)
        logger.info(f"Level {level}: {current.count} primitives, {coded[level].size_bytes} bytes")
    return coded


def compress(gs: GaussianSet, schedule: LevelSchedule, level: int, views: Sequence[Camera],
             targets: Sequence[torch.Tensor], finetune_iters: int = 200,
             options: Optional[CompressOptions] = None) -> CodedScene:
    """Compress ``gs`` to a single rate level."""
    options = replace(options or CompressOptions(), finetune_iters=finetune_iters)
    return compress_levels(gs, schedule, views, targets, options, lowest_level=level)[level]


def decompress(coded: CodedScene) -> GaussianSet:
    return coded.gaussians()
