"""
Saliency pruning and post-prune fine-tuning.

Pruning keeps the primitives whose rendering-loss gradients are largest;
fine-tuning then adapts the survivors with AdamW on the same loss, one
randomly chosen training view per iteration.
"""

import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from splatrestore.diffeng import AdamWState, adamw_step, backward, zero_grad
from splatrestore.errors import InputError, NumericalError
from splatrestore.raster import RasterSettings, render, rendering_loss
from splatrestore.scene import Camera, GaussianSet

logger = logging.getLogger(__name__)

# Per-group rates, a tenth of the usual splatting training rates
DEFAULT_LEARNING_RATES: Dict[str, float] = {
    "positions": 1.6e-5,
    "rotations": 1e-3,
    "log_scales": 5e-3,
    "opacity_logits": 2.5e-2,
    "sh_coeffs": 2.5e-3,
}


def prune(gs: GaussianSet, scores, keep: int) -> GaussianSet:
    """Keep the ``keep`` highest-scoring primitives in their original order.

    Ties go to the lower original index.
    """
    scores = torch.as_tensor(scores, dtype=torch.float64).reshape(-1)
    if scores.numel() != gs.count:
        raise InputError(f"{scores.numel()} scores for {gs.count} primitives")
    if keep <= 0:
        raise InputError(f"keep must be positive, got {keep}")
    if keep > gs.count:
        raise InputError(f"cannot keep {keep} of {gs.count} primitives")
    order = torch.sort(-scores, stable=True).indices[:keep]
    return gs.select(torch.sort(order).values)


def finetune_with_history(
    gs: GaussianSet,
    views: Sequence[Camera],
    targets: Sequence[torch.Tensor],
    iters: int,
    learning_rates: Optional[Dict[str, float]] = None,
    seed: int = 0,
    background=(0.0, 0.0, 0.0),
    lambda_ssim: float = 0.2,
    settings: Optional[RasterSettings] = None,
) -> Tuple[GaussianSet, List[float]]:
    """Fine-tune every attribute of ``gs`` and return it with the per-iteration losses.

    Raises:
        NumericalError: The loss became non-finite; diagnostics hold the iteration
    """
    if iters < 0:
        raise InputError(f"iters must be non-negative, got {iters}")
    if iters == 0:
        return gs, []
    if not views or len(views) != len(targets):
        raise InputError(f"fine-tuning needs matching views and targets, got {len(views)} and {len(targets)}")
    rates = dict(DEFAULT_LEARNING_RATES)
    rates.update(learning_rates or {})

    params = gs.with_grad().attributes()
    state = AdamWState(eps=1e-15)
    rng = np.random.default_rng(seed)
    losses: List[float] = []
    for iteration in range(iters):
        view = int(rng.integers(len(views)))
        current = GaussianSet.from_attributes(params, gs.sh_degree)
        out = render(current, views[view], background, with_grad=True, settings=settings)
        loss = rendering_loss(out.image, targets[view].to(gs.dtype), lambda_ssim)
        if not bool(torch.isfinite(loss)):
            raise NumericalError(
                f"fine-tune loss became non-finite at iteration {iteration}",
                {"iteration": iteration, "view": view, "recent_losses": losses[-10:]},
            )
        zero_grad(params)
        backward(loss)
        adamw_step(params, rates, weight_decay=0.0, clip_norm=None, state=state)
        losses.append(float(loss.detach()))
        if iteration % 50 == 0:
            logger.debug(f"fine-tune {iteration}/{iters}: loss {losses[-1]:.5f}")

    tuned = GaussianSet.from_attributes({k: v.detach() for k, v in params.items()}, gs.sh_degree)
    return tuned, losses


def finetune(gs: GaussianSet, views: Sequence[Camera], targets: Sequence[torch.Tensor], iters: int,
             learning_rates: Optional[Dict[str, float]] = None, **kwargs) -> GaussianSet:
    """Fine-tune ``gs`` on the rendering loss; the primitive count is unchanged."""
    tuned, _ = finetune_with_history(gs, views, targets, iters, learning_rates, **kwargs)
    return tuned
