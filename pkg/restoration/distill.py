"""
Restoration distribution matching.

The restorer adapter is trained with a distribution-matching signal (critic
score minus base score at the restored image, blended with a ground-truth
term) plus l2 and perceptual losses; the critic adapter is trained with the
flow-matching loss on the restorer's current outputs. The two updates
alternate, one each per global step.
"""

import functools
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from splatrestore.diffeng import AdamWState, adamw_step, backward, zero_grad
from splatrestore.errors import InputError, NumericalError, ShapeError

from .dataset import DatasetManifest, TrainingPair, sample_batch, stack_batch
from .diffusion import RestorerState, denoised_estimate, forward_diffuse, one_step_restore

logger = logging.getLogger(__name__)

Tensor = torch.Tensor
Batch = Union[Sequence[TrainingPair], Tuple[Tensor, Tensor, Tensor]]

PHI_MINUS_BASE_LR = 5e-6
PHI_PLUS_BASE_LR = 1e-6
SIGNAL_FLOOR = 1e-4


@dataclass
class DistillConfig:
    """Hyperparameters of the alternating training loop."""

    alpha: float = 0.7
    cfg_scale: float = 7.5
    t0: int = 199
    lambda_l2: float = 1.0
    lambda_perc: float = 1.0
    lr_scale: float = 100.0
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    steps: int = 2000
    batch_size: int = 4
    seed: int = 0
    cond_dropout: float = 0.1
    checkpoint_every: int = 500
    log_every: int = 50

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise InputError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.steps < 0 or self.batch_size < 1:
            raise InputError(f"invalid steps={self.steps} or batch_size={self.batch_size}")
        if not 0.0 <= self.cond_dropout <= 1.0:
            raise InputError(f"cond_dropout must lie in [0, 1], got {self.cond_dropout}")

    @property
    def lr_minus(self) -> float:
        return PHI_MINUS_BASE_LR * self.lr_scale

    @property
    def lr_plus(self) -> float:
        return PHI_PLUS_BASE_LR * self.lr_scale

    @classmethod
    def from_settings(cls, config) -> "DistillConfig":
        d = config.distill
        return cls(alpha=d.alpha, cfg_scale=d.cfg_scale, t0=config.diffusion.t0, lambda_l2=d.lambda_l2,
                   lambda_perc=d.lambda_perc, lr_scale=d.lr_scale, weight_decay=d.weight_decay,
                   clip_norm=d.clip_norm, steps=d.steps, batch_size=d.batch_size, seed=config.run.seed,
                   cond_dropout=config.diffusion.cond_dropout, checkpoint_every=d.checkpoint_every,
                   log_every=d.log_every)


@dataclass
class StepReport:
    """Losses and pre-clip gradient norms of one training step; unset fields are ``None``."""

    step: int
    loss_kl: Optional[float] = None
    l2: Optional[float] = None
    perceptual: Optional[float] = None
    loss_plus: Optional[float] = None
    grad_norm_minus: Optional[float] = None
    grad_norm_plus: Optional[float] = None

    def merged(self, other: "StepReport") -> "StepReport":
        values = {k: v for k, v in asdict(other).items() if v is not None}
        return StepReport(**{**asdict(self), **values})

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for k, v in asdict(self).items() if k != "step" and v is not None)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


# ---------------------------------------------------------------------------
# Perceptual proxy
# ---------------------------------------------------------------------------

PERCEPTUAL_SEED = 20240
PERCEPTUAL_WIDTHS = (16, 32, 32)
PERCEPTUAL_SCALES = 3


class PerceptualFeatures(nn.Module):
    """Three frozen, randomly initialized conv layers; returns every layer's activations."""

    def __init__(self, widths: Sequence[int] = PERCEPTUAL_WIDTHS):
        super().__init__()
        channels = [3] + list(widths)
        self.layers = nn.ModuleList(
            nn.Conv2d(c_in, c_out, 3, padding=1) for c_in, c_out in zip(channels[:-1], channels[1:])
        )

    def forward(self, x: Tensor) -> List[Tensor]:
        features = []
        for layer in self.layers:
            x = F.relu(layer(x))
            features.append(x)
        return features


@functools.lru_cache(maxsize=1)
def _feature_stack() -> PerceptualFeatures:
    with torch.random.fork_rng():
        torch.manual_seed(PERCEPTUAL_SEED)
        net = PerceptualFeatures()
    for p in net.parameters():
        p.requires_grad_(False)
    return net.eval()


def _unit_channels(f: Tensor) -> Tensor:
    return f / torch.sqrt((f * f).sum(dim=1, keepdim=True) + 1e-10)


def perceptual(x: Tensor, y: Tensor, reduction: str = "mean") -> Tensor:
    """Multi-scale feature distance between B x 3 x H x W images.

    Features are normalized to unit length across channels at every pixel;
    the squared differences are averaged per layer and summed over layers and
    scales (full, 1/2 and 1/4 resolution).

    Args:
        x: Reference images
        y: Compared images, same shape as ``x``
        reduction: ``"mean"`` over the batch, or ``"none"`` for one value per image

    Returns:
        Scalar tensor, or a length-B tensor with ``reduction="none"``.
    """
    if x.shape != y.shape:
        raise ShapeError(f"perceptual inputs differ: {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.ndim == 3:
        x, y = x.unsqueeze(0), y.unsqueeze(0)
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected B x 3 x H x W images, got {tuple(x.shape)}")
    if reduction not in ("mean", "none"):
        raise InputError(f"unknown reduction '{reduction}'")
    net = _feature_stack()
    x = x.to(torch.float32)
    y = y.to(torch.float32)
    total = torch.zeros(x.shape[0], dtype=torch.float32)
    for scale in range(PERCEPTUAL_SCALES):
        if scale:
            x = F.avg_pool2d(x, 2)
            y = F.avg_pool2d(y, 2)
        for fx, fy in zip(net(x), net(y)):
            total = total + (_unit_channels(fx) - _unit_channels(fy)).pow(2).mean(dim=(1, 2, 3))
    return total.mean() if reduction == "mean" else total


# ---------------------------------------------------------------------------
# Training steps
# ---------------------------------------------------------------------------

def _as_tensors(batch: Batch) -> Tuple[Tensor, Tensor, Tensor]:
    if isinstance(batch, tuple) and len(batch) == 3 and isinstance(batch[0], Tensor):
        return batch
    return stack_batch(list(batch))


def _drop_conditions(conditions: Tensor, null_token: int, probability: float,
                     generator: torch.Generator) -> Tensor:
    drop = torch.rand(conditions.shape[0], generator=generator) < probability
    return torch.where(drop, torch.full_like(conditions, null_token), conditions)


def _sample_t(state: RestorerState, batch: int, generator: torch.Generator) -> Tensor:
    schedule = state.schedule
    return torch.randint(schedule.t_min, schedule.t_max + 1, (batch,), generator=generator)


@torch.no_grad()
def dmd_gradient(state: RestorerState, x_hat: Tensor, x: Tensor, t: Tensor, eps_t: Tensor, alpha: float,
                 cfg_scale: float, condition: Tensor) -> Tensor:
    """Gradient signal applied to the restored latents ``x_hat``.

    alpha * (s_restore(x_hat_t) - s_real(x_hat_t))
    + (1 - alpha) * (s_real(x_hat_t) - s_real(x_t)),

    with ``x_hat_t`` and ``x_t`` built from the same ``t`` and ``eps_t``. Each
    sample is divided by its mean absolute value plus 1e-4. No gradient flows
    through the score networks.

    Raises:
        NumericalError: A score estimate is non-finite
    """
    if x_hat.shape != x.shape or x.shape != eps_t.shape:
        raise ShapeError(f"x_hat {tuple(x_hat.shape)}, x {tuple(x.shape)} and noise "
                         f"{tuple(eps_t.shape)} must match")
    x_hat = x_hat.detach()
    x_hat_t = forward_diffuse(x_hat, t, eps_t, state.schedule)
    s_real_hat = denoised_estimate(state, "base", x_hat_t, t, condition, cfg_scale)
    signal = torch.zeros_like(x_hat)
    if alpha > 0.0:
        s_restore_hat = denoised_estimate(state, "phi_plus", x_hat_t, t, condition, cfg_scale)
        signal = signal + alpha * (s_restore_hat - s_real_hat)
    if alpha < 1.0:
        x_t = forward_diffuse(x, t, eps_t, state.schedule)
        s_real_x = denoised_estimate(state, "base", x_t, t, condition, cfg_scale)
        signal = signal + (1.0 - alpha) * (s_real_hat - s_real_x)
    if not bool(torch.isfinite(signal).all()):
        raise NumericalError("distribution matching signal is non-finite", {"t": t.tolist()})
    scale = signal.abs().mean(dim=tuple(range(1, signal.ndim)), keepdim=True) + SIGNAL_FLOOR
    return signal / scale


def phi_minus_step(state: RestorerState, batch: Batch, cfg: DistillConfig, optimizer: AdamWState,
                   generator: torch.Generator, step: int = 0) -> StepReport:
    """One update of the restorer adapter on distribution matching plus l2 and perceptual losses."""
    degraded, clean, conditions = _as_tensors(batch)
    conditions = _drop_conditions(conditions, state.null_token, cfg.cond_dropout, generator)
    eps = torch.randn(degraded.shape, generator=generator)
    t = _sample_t(state, degraded.shape[0], generator)
    eps_t = torch.randn(degraded.shape, generator=generator)

    x_hat = one_step_restore(state, degraded, eps, conditions, cfg.cfg_scale, t0=cfg.t0, which="phi_minus")
    signal = dmd_gradient(state, x_hat, clean, t, eps_t, cfg.alpha, cfg.cfg_scale, conditions)
    loss_kl = (signal * x_hat).mean()
    l2 = F.mse_loss(x_hat, clean)
    perc = perceptual(clean, x_hat)
    loss = loss_kl + cfg.lambda_l2 * l2 + cfg.lambda_perc * perc

    report = StepReport(step=step, loss_kl=float(loss_kl.detach()), l2=float(l2.detach()),
                        perceptual=float(perc.detach()))
    if not report.is_finite():
        raise NumericalError(f"restorer loss is non-finite at step {step}", report.to_dict())
    params = state.adapter_parameters("phi_minus")
    zero_grad(params)
    backward(loss)
    report.grad_norm_minus = adamw_step(params, cfg.lr_minus, cfg.weight_decay, cfg.clip_norm, optimizer)
    return report


def phi_plus_step(state: RestorerState, batch: Batch, cfg: DistillConfig, optimizer: AdamWState,
                  generator: torch.Generator, step: int = 0) -> StepReport:
    """One update of the critic adapter: flow matching on the current, detached restorations."""
    degraded, _, conditions = _as_tensors(batch)
    conditions = _drop_conditions(conditions, state.null_token, cfg.cond_dropout, generator)
    eps = torch.randn(degraded.shape, generator=generator)
    with torch.no_grad():
        x_hat = one_step_restore(state, degraded, eps, conditions, cfg.cfg_scale, t0=cfg.t0, which="phi_minus")
    t = _sample_t(state, degraded.shape[0], generator)
    eps_t = torch.randn(degraded.shape, generator=generator)
    x_hat_t = forward_diffuse(x_hat, t, eps_t, state.schedule)
    loss = F.mse_loss(state.velocity("phi_plus", x_hat_t, t, conditions), eps_t - x_hat)

    report = StepReport(step=step, loss_plus=float(loss.detach()))
    if not report.is_finite():
        raise NumericalError(f"critic loss is non-finite at step {step}", report.to_dict())
    params = state.adapter_parameters("phi_plus")
    zero_grad(params)
    backward(loss)
    report.grad_norm_plus = adamw_step(params, cfg.lr_plus, cfg.weight_decay, cfg.clip_norm, optimizer)
    return report


def train(manifest: DatasetManifest, state: RestorerState, cfg: DistillConfig,
          out_dir: Optional[Union[str, Path]] = None) -> Tuple[RestorerState, List[StepReport]]:
    """Alternate restorer and critic updates for ``cfg.steps`` global steps.

    Args:
        manifest: Training pairs
        state: Restorer with a pretrained, frozen base
        cfg: Loop hyperparameters
        out_dir: Where ``train_log.jsonl`` and ``restorer_step<k>.ckpt`` go (nothing is written when omitted)

    Returns:
        The trained state (updated in place) and one report per step.

    Raises:
        NumericalError: A loss or gradient became non-finite; ``last_report.json`` holds the diagnostics
    """
    reports: List[StepReport] = []
    if cfg.steps == 0:
        return state, reports
    if not 0 < cfg.t0 < state.schedule.T:
        raise InputError(f"t0 must lie in (0, {state.schedule.T}), got {cfg.t0}")

    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = (out / "train_log.jsonl").open("w")

    batch_size = cfg.batch_size
    scenes = len(manifest.scene_ids)
    if batch_size > scenes:
        logger.warning(f"Batch size {batch_size} exceeds the {scenes} scenes available, using {scenes}")
        batch_size = scenes

    rng = np.random.default_rng(cfg.seed)
    generator = torch.Generator().manual_seed(cfg.seed)
    opt_minus, opt_plus = AdamWState(), AdamWState()
    try:
        for step in range(1, cfg.steps + 1):
            batch = stack_batch(sample_batch(manifest, batch_size, rng))
            try:
                report = phi_minus_step(state, batch, cfg, opt_minus, generator, step)
                report = report.merged(phi_plus_step(state, batch, cfg, opt_plus, generator, step))
            except NumericalError as e:
                if out is not None:
                    (out / "last_report.json").write_text(json.dumps(e.diagnostics, indent=2, default=str) + "\n")
                logger.error(f"Training aborted at step {step}: {e}")
                raise
            reports.append(report)
            if log_file is not None:
                log_file.write(json.dumps(report.to_dict(), sort_keys=True) + "\n")
            if step % cfg.log_every == 0:
                logger.info(f"step {step}/{cfg.steps}: kl {report.loss_kl:.4f} l2 {report.l2:.5f} "
                            f"perc {report.perceptual:.4f} critic {report.loss_plus:.5f}")
            if out is not None and (step % cfg.checkpoint_every == 0 or step == cfg.steps):
                state.save(out / f"restorer_step{step}.ckpt", step=step)
    finally:
        if log_file is not None:
            log_file.close()
    return state, reports
