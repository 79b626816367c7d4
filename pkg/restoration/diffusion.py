"""
Flow-style diffusion core.

The forward process is x_t = (1 - sigma_t) x + sigma_t eps with sigma_t = t / T,
and networks predict the velocity v = eps - x, so that x_t - sigma_t v recovers x.
Latents are images in pixel space (B x 3 x H x W); the encoder and decoder are
identity maps apart from the decoder's clamp to [0, 1].

Anything exposing ``schedule``, ``null_token`` and
``velocity(which, x_t, t, condition)`` can be used wherever a restorer is expected.
"""

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from splatrestore.diffeng import AdamWState, adamw_step, backward, load_checkpoint, save_checkpoint, zero_grad
from splatrestore.errors import FormatError, InputError, NumericalError, ShapeError

logger = logging.getLogger(__name__)

Tensor = torch.Tensor

ADAPTERS = ("phi_minus", "phi_plus")
SELECTORS = ("base",) + ADAPTERS


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear noise schedule sigma_t = t / T."""

    T: int = 1000
    t0: int = 199
    t_min: int = 20
    t_max: int = 980

    def __post_init__(self):
        if self.T < 2:
            raise InputError(f"T must be at least 2, got {self.T}")
        if not 0 < self.t0 < self.T:
            raise InputError(f"t0 must lie in (0, T), got {self.t0}")
        if not 0 < self.t_min < self.t_max < self.T:
            raise InputError(f"need 0 < t_min < t_max < T, got {self.t_min}, {self.t_max}")

    def sigma(self, t: Union[int, Tensor]) -> Union[float, Tensor]:
        if isinstance(t, Tensor):
            return t.to(torch.float32) / self.T
        if not 0 <= t <= self.T:
            raise InputError(f"timestep {t} outside [0, {self.T}]")
        return t / self.T

    def to_dict(self) -> Dict[str, int]:
        return asdict(self)


def _timesteps(t: Union[int, Tensor], batch: int) -> Tensor:
    t = torch.as_tensor(t, dtype=torch.long)
    if t.ndim == 0:
        t = t.expand(batch)
    if t.shape != (batch,):
        raise ShapeError(f"timesteps shape {tuple(t.shape)} does not match batch {batch}")
    return t


def _per_sample(values: Tensor, like: Tensor) -> Tensor:
    return values.to(like.dtype).reshape(-1, *([1] * (like.ndim - 1)))


def forward_diffuse(x: Tensor, t: Union[int, Tensor], eps: Tensor,
                    schedule: Optional[DiffusionSchedule] = None) -> Tensor:
    """x_t = (1 - sigma_t) x + sigma_t eps, with ``t`` scalar or one per sample."""
    schedule = schedule or DiffusionSchedule()
    if x.shape != eps.shape:
        raise ShapeError(f"latents {tuple(x.shape)} and noise {tuple(eps.shape)} differ")
    t = _timesteps(t, x.shape[0])
    if bool(((t < 0) | (t > schedule.T)).any()):
        raise InputError(f"timesteps must lie in [0, {schedule.T}]")
    sigma = _per_sample(schedule.sigma(t), x)
    return (1.0 - sigma) * x + sigma * eps


def encode_latents(images: Tensor) -> Tensor:
    """H x W x 3 or B x H x W x 3 images -> B x 3 x H x W latents."""
    if images.ndim == 3:
        images = images.unsqueeze(0)
    if images.ndim != 4 or images.shape[-1] != 3:
        raise ShapeError(f"expected channel-last RGB images, got {tuple(images.shape)}")
    return images.permute(0, 3, 1, 2).to(torch.float32).contiguous()


def decode_latents(latents: Tensor) -> Tensor:
    """B x 3 x H x W latents -> B x H x W x 3 images clamped to [0, 1]."""
    return latents.detach().clamp(0.0, 1.0).permute(0, 2, 3, 1).contiguous()


# ---------------------------------------------------------------------------
# Low-rank adapters
# ---------------------------------------------------------------------------

class LowRankAdapter(nn.Module):
    """Factors of a rank-``rank`` weight update ``scale * B @ A``; B starts at zero."""

    def __init__(self, in_features: int, out_features: int, rank: int, scale: float = 1.0):
        super().__init__()
        self.scale = scale
        self.A = nn.Parameter(torch.randn(rank, in_features) / math.sqrt(in_features))
        self.B = nn.Parameter(torch.zeros(out_features, rank))

    def delta(self) -> Tensor:
        return self.scale * (self.B @ self.A)


class AdaptedLinear(nn.Module):
    """A linear layer with one optional low-rank adapter per name, selected per call."""

    def __init__(self, in_features: int, out_features: int, rank: int, scale: float,
                 adapters: Sequence[str] = ADAPTERS):
        super().__init__()
        self.base = nn.Linear(in_features, out_features)
        self.adapters = nn.ModuleDict({
            name: LowRankAdapter(in_features, out_features, rank, scale) for name in adapters
        })

    def forward(self, x: Tensor, adapter: Optional[str] = None) -> Tensor:
        out = self.base(x)
        if adapter is None:
            return out
        lora = self.adapters[adapter]
        return out + lora.scale * F.linear(F.linear(x, lora.A), lora.B)


class AdaptedConv2d(nn.Module):
    """Convolution whose adapters factor the flattened kernel as B @ A.

    A is applied as a rank-channel convolution with the base kernel size and
    B as a 1 x 1 convolution on top of it.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rank: int, scale: float,
                 stride: int = 1, adapters: Sequence[str] = ADAPTERS):
        super().__init__()
        padding = kernel_size // 2
        self.base = nn.Conv2d(in_channels, out_channels, kernel_size, stride=stride, padding=padding)
        self.kernel_size = kernel_size
        self.adapters = nn.ModuleDict({
            name: LowRankAdapter(in_channels * kernel_size * kernel_size, out_channels, rank, scale)
            for name in adapters
        })

    def forward(self, x: Tensor, adapter: Optional[str] = None) -> Tensor:
        out = self.base(x)
        if adapter is None:
            return out
        lora = self.adapters[adapter]
        k = self.kernel_size
        down = F.conv2d(x, lora.A.reshape(-1, x.shape[1], k, k), stride=self.base.stride,
                        padding=self.base.padding)
        up = F.conv2d(down, lora.B.reshape(lora.B.shape[0], -1, 1, 1))
        return out + lora.scale * up


# ---------------------------------------------------------------------------
# Denoiser
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NetConfig:
    channels: int = 32
    rank: int = 8
    scale: float = 1.0
    vocab_size: int = 16


def timestep_embedding(t: Tensor, dim: int) -> Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.to(torch.float32).unsqueeze(1) * freqs.unsqueeze(0)
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, emb_dim: int, cfg: NetConfig):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, in_channels)
        self.conv1 = AdaptedConv2d(in_channels, out_channels, 3, cfg.rank, cfg.scale)
        self.emb = AdaptedLinear(emb_dim, out_channels, cfg.rank, cfg.scale)
        self.norm2 = nn.GroupNorm(8, out_channels)
        self.conv2 = AdaptedConv2d(out_channels, out_channels, 3, cfg.rank, cfg.scale)
        self.skip = (AdaptedConv2d(in_channels, out_channels, 1, cfg.rank, cfg.scale)
                     if in_channels != out_channels else None)

    def forward(self, x: Tensor, emb: Tensor, adapter: Optional[str]) -> Tensor:
        h = self.conv1(F.silu(self.norm1(x)), adapter)
        h = h + self.emb(emb, adapter)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)), adapter)
        skip = x if self.skip is None else self.skip(x, adapter)
        return skip + h


class DenoiserNet(nn.Module):
    """Small two-level U-Net predicting velocity, with time and class conditioning.

    The class embedding table has ``vocab_size + 1`` rows; the last row is the
    null token used for unconditional prediction.
    """

    def __init__(self, cfg: NetConfig = NetConfig()):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        emb_dim = 4 * c
        self.time1 = AdaptedLinear(c, emb_dim, cfg.rank, cfg.scale)
        self.time2 = AdaptedLinear(emb_dim, emb_dim, cfg.rank, cfg.scale)
        self.label = nn.Embedding(cfg.vocab_size + 1, emb_dim)
        self.stem = AdaptedConv2d(3, c, 3, cfg.rank, cfg.scale)
        self.enc1 = ResBlock(c, c, emb_dim, cfg)
        self.down1 = AdaptedConv2d(c, 2 * c, 3, cfg.rank, cfg.scale, stride=2)
        self.enc2 = ResBlock(2 * c, 2 * c, emb_dim, cfg)
        self.down2 = AdaptedConv2d(2 * c, 2 * c, 3, cfg.rank, cfg.scale, stride=2)
        self.mid = ResBlock(2 * c, 2 * c, emb_dim, cfg)
        self.dec2 = ResBlock(4 * c, 2 * c, emb_dim, cfg)
        self.dec1 = ResBlock(3 * c, c, emb_dim, cfg)
        self.out_norm = nn.GroupNorm(8, c)
        self.out = AdaptedConv2d(c, 3, 3, cfg.rank, cfg.scale)

    @property
    def null_token(self) -> int:
        return self.cfg.vocab_size

    def forward(self, x: Tensor, t: Tensor, condition: Tensor, adapter: Optional[str] = None) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected B x 3 x H x W latents, got {tuple(x.shape)}")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ShapeError(f"latent height and width must be multiples of 4, got {tuple(x.shape[2:])}")
        if adapter is not None and adapter not in ADAPTERS:
            raise InputError(f"unknown adapter '{adapter}'")
        if bool(((condition < 0) | (condition > self.null_token)).any()):
            raise InputError(f"condition labels must lie in [0, {self.null_token}]")

        emb = self.time1(timestep_embedding(t, self.cfg.channels), adapter)
        emb = self.time2(F.silu(emb), adapter) + self.label(condition)

        h0 = self.enc1(self.stem(x, adapter), emb, adapter)
        h1 = self.enc2(self.down1(h0, adapter), emb, adapter)
        h = self.mid(self.down2(h1, adapter), emb, adapter)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.dec2(torch.cat([h, h1], dim=1), emb, adapter)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.dec1(torch.cat([h, h0], dim=1), emb, adapter)
        return self.out(F.silu(self.out_norm(h)), adapter)

    def base_parameters(self) -> Dict[str, nn.Parameter]:
        return {n: p for n, p in self.named_parameters() if ".adapters." not in n}

    def adapter_parameters(self, which: str) -> Dict[str, nn.Parameter]:
        if which not in ADAPTERS:
            raise InputError(f"unknown adapter '{which}'")
        return {n: p for n, p in self.named_parameters() if f".adapters.{which}." in n}


def build_denoiser(cfg: NetConfig, seed: int = 0) -> DenoiserNet:
    """Construct a denoiser with seeded initialization, leaving the global RNG untouched."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return DenoiserNet(cfg)


# ---------------------------------------------------------------------------
# Restorer state and inference
# ---------------------------------------------------------------------------

class RestorerState:
    """Frozen base denoiser plus the restorer and critic adapters."""

    def __init__(self, net: DenoiserNet, schedule: Optional[DiffusionSchedule] = None):
        self.net = net
        self.schedule = schedule or DiffusionSchedule()
        for p in net.base_parameters().values():
            p.requires_grad_(False)
        for which in ADAPTERS:
            for p in net.adapter_parameters(which).values():
                p.requires_grad_(True)

    @property
    def null_token(self) -> int:
        return self.net.null_token

    def velocity(self, which: str, x_t: Tensor, t: Tensor, condition: Tensor) -> Tensor:
        if which not in SELECTORS:
            raise InputError(f"unknown predictor '{which}', expected one of {', '.join(SELECTORS)}")
        return self.net(x_t, t, condition, None if which == "base" else which)

    def adapter_parameters(self, which: str) -> Dict[str, nn.Parameter]:
        return self.net.adapter_parameters(which)

    def base_state(self) -> Dict[str, Tensor]:
        return {n: p.detach().clone() for n, p in self.net.base_parameters().items()}

    def header(self, kind: str = "restorer", **extra: Any) -> Dict[str, Any]:
        return {"kind": kind, "schedule": self.schedule.to_dict(), "net": asdict(self.net.cfg), **extra}

    def save(self, path: Union[str, Path], **extra: Any) -> int:
        tensors = {n: t.detach() for n, t in self.net.state_dict().items()}
        return save_checkpoint(path, tensors, self.header(**extra))

    @classmethod
    def load(cls, path: Union[str, Path], seed: int = 0) -> "RestorerState":
        """Load a restorer, or start one from a base checkpoint with fresh adapters.

        Raises:
            FormatError: Unknown checkpoint kind or mismatched tensors
        """
        header, tensors = load_checkpoint(path)
        if header.get("kind") not in ("base", "restorer"):
            raise FormatError(f"{path} is not a denoiser checkpoint (kind={header.get('kind')})")
        try:
            cfg = NetConfig(**header["net"])
            schedule = DiffusionSchedule(**header["schedule"])
        except (KeyError, TypeError) as e:
            raise FormatError(f"{path} has an incomplete header: {e}") from None
        net = build_denoiser(cfg, seed)
        result = net.load_state_dict(tensors, strict=False)
        unexpected = list(result.unexpected_keys)
        missing = [k for k in result.missing_keys if ".adapters." not in k or header["kind"] == "restorer"]
        if unexpected or missing:
            raise FormatError(f"{path} does not match the denoiser: missing {missing[:3]}, "
                              f"unexpected {unexpected[:3]}")
        logger.info(f"Loaded {header['kind']} checkpoint {path}")
        return cls(net, schedule)


class ZeroVelocity:
    """Predicts zero velocity everywhere; restoration with it is a passthrough."""

    def __init__(self, schedule: Optional[DiffusionSchedule] = None, null_token: int = 16):
        self.schedule = schedule or DiffusionSchedule()
        self.null_token = null_token

    def velocity(self, which: str, x_t: Tensor, t: Tensor, condition: Tensor) -> Tensor:
        if which not in SELECTORS:
            raise InputError(f"unknown predictor '{which}'")
        return torch.zeros_like(x_t)


def predict(model, which: str, x_t: Tensor, t: Union[int, Tensor], condition: Union[int, Tensor],
            cfg_scale: float = 1.0) -> Tensor:
    """Guided velocity v_u + g (v_c - v_u).

    ``cfg_scale == 1`` returns the conditional prediction unchanged, and rows
    whose condition is the null token return the unconditional prediction.
    """
    batch = x_t.shape[0]
    t = _timesteps(t, batch)
    condition = _timesteps(condition, batch)
    v_cond = model.velocity(which, x_t, t, condition)
    if cfg_scale == 1.0:
        return v_cond
    null = torch.full_like(condition, model.null_token)
    v_uncond = model.velocity(which, x_t, t, null)
    guided = v_uncond + cfg_scale * (v_cond - v_uncond)
    is_null = _per_sample(condition == model.null_token, x_t).bool()
    return torch.where(is_null, v_uncond, guided)


def denoised_estimate(model, which: str, x_t: Tensor, t: Union[int, Tensor], condition: Union[int, Tensor],
                      cfg_scale: float = 1.0) -> Tensor:
    """s(x_t) = x_t - sigma_t v(x_t, t); samples at t = 0 pass through unchanged."""
    t = _timesteps(t, x_t.shape[0])
    if not bool((t > 0).any()):
        return x_t
    sigma = _per_sample(model.schedule.sigma(t), x_t)
    return x_t - sigma * predict(model, which, x_t, t, condition, cfg_scale)


def _euler(model, which: str, x: Tensor, timesteps: Sequence[int], condition, cfg_scale: float) -> Tensor:
    schedule = model.schedule
    for t_hi, t_lo in zip(timesteps[:-1], timesteps[1:]):
        v = predict(model, which, x, t_hi, condition, cfg_scale)
        x = x - (schedule.sigma(t_hi) - schedule.sigma(t_lo)) * v
    return x


def euler_sample(model, which: str, x_T: Tensor, steps: int, condition, cfg_scale: float = 1.0) -> Tensor:
    """Deterministic Euler integration from t = T to 0 in ``steps`` equal steps."""
    T = model.schedule.T
    if steps < 1 or T % steps:
        raise InputError(f"steps must be a positive divisor of T={T}, got {steps}")
    delta = T // steps
    return _euler(model, which, x_T, [T - k * delta for k in range(steps + 1)], condition, cfg_scale)


def one_step_restore(model, x_tilde: Tensor, eps: Tensor, condition, cfg_scale: float = 1.0,
                     t0: Optional[int] = None, which: str = "phi_minus", noise_scale: float = 1.0) -> Tensor:
    """Project the degraded latents to t0 and denoise them in one step.

    With ``t0 >= T`` the degraded latents are fed directly at t = T. That variant is
    inference-only: ``distill.train`` rejects t0 >= T. ``noise_scale`` blends the
    projection: 1 is the full forward process, 0 leaves the input as is.
    """
    schedule = model.schedule
    t0 = schedule.t0 if t0 is None else t0
    if t0 < 1:
        raise InputError(f"t0 must be positive, got {t0}")
    if t0 >= schedule.T:
        return denoised_estimate(model, which, x_tilde, schedule.T, condition, cfg_scale)
    if x_tilde.shape != eps.shape:
        raise ShapeError(f"latents {tuple(x_tilde.shape)} and noise {tuple(eps.shape)} differ")
    if noise_scale == 1.0:
        x_t0 = forward_diffuse(x_tilde, t0, eps, schedule)
    else:
        x_t0 = x_tilde + noise_scale * schedule.sigma(t0) * (eps - x_tilde)
    return denoised_estimate(model, which, x_t0, t0, condition, cfg_scale)


def img2img_restore(model, x_tilde: Tensor, eps: Tensor, condition, cfg_scale: float = 1.0,
                    t0: Optional[int] = None, steps: int = 10, which: str = "base") -> Tensor:
    """Training-free baseline: noise to t0, then Euler-integrate the frozen base to 0."""
    schedule = model.schedule
    t0 = schedule.t0 if t0 is None else min(t0, schedule.T)
    if steps < 1:
        raise InputError(f"steps must be positive, got {steps}")
    grid = torch.linspace(float(t0), 0.0, steps + 1).round().long().tolist()
    timesteps = [t for i, t in enumerate(grid) if i == 0 or t != grid[i - 1]]
    x_t0 = forward_diffuse(x_tilde, t0, eps, schedule)
    return _euler(model, which, x_t0, timesteps, condition, cfg_scale)


# ---------------------------------------------------------------------------
# Base pretraining
# ---------------------------------------------------------------------------

def flow_matching_loss(model, which: str, x: Tensor, t: Tensor, eps: Tensor, condition: Tensor) -> Tensor:
    """Mean squared error between predicted and true velocity eps - x at x_t."""
    x_t = forward_diffuse(x, t, eps, model.schedule)
    return F.mse_loss(model.velocity(which, x_t, t, condition), eps - x)


def pretrain_base(net: DenoiserNet, images: Tensor, conditions: Tensor, steps: int, lr: float = 2e-4,
                  batch_size: int = 8, seed: int = 0, cond_dropout: float = 0.1,
                  schedule: Optional[DiffusionSchedule] = None, log_every: int = 100) -> List[float]:
    """Train the base denoiser with flow matching on clean latents.

    Args:
        net: Denoiser whose base weights are trained (adapters are not used)
        images: N x 3 x H x W clean latents
        conditions: N class labels
        steps: Optimizer steps
        lr: AdamW learning rate
        batch_size: Samples per step, drawn with replacement
        seed: Seed for batches, timesteps, noise and condition dropout
        cond_dropout: Probability of replacing a label by the null token
        schedule: Noise schedule
        log_every: Log the running loss every this many steps

    Returns:
        Per-step losses.
    """
    schedule = schedule or DiffusionSchedule()
    if images.ndim != 4 or images.shape[0] != conditions.shape[0]:
        raise ShapeError(f"images {tuple(images.shape)} and conditions {tuple(conditions.shape)} do not pair up")
    model = _BaseTrainer(net, schedule)
    params = net.base_parameters()
    for p in params.values():
        p.requires_grad_(True)
    state = AdamWState()
    generator = torch.Generator().manual_seed(seed)
    losses: List[float] = []
    for step in range(steps):
        index = torch.randint(images.shape[0], (batch_size,), generator=generator)
        x = images[index]
        t = torch.randint(1, schedule.T + 1, (batch_size,), generator=generator)
        eps = torch.randn(x.shape, generator=generator)
        drop = torch.rand(batch_size, generator=generator) < cond_dropout
        condition = torch.where(drop, torch.full_like(conditions[index], net.null_token), conditions[index])
        loss = flow_matching_loss(model, "base", x, t, eps, condition)
        if not bool(torch.isfinite(loss)):
            raise NumericalError(f"base pretraining loss became non-finite at step {step}",
                                 {"step": step, "recent_losses": losses[-10:]})
        zero_grad(params)
        backward(loss)
        adamw_step(params, lr, weight_decay=1e-4, clip_norm=1.0, state=state)
        losses.append(float(loss.detach()))
        if (step + 1) % log_every == 0:
            recent = losses[-log_every:]
            logger.info(f"pretrain step {step + 1}/{steps}: loss {sum(recent) / len(recent):.5f}")
    for p in params.values():
        p.requires_grad_(False)
    return losses


class _BaseTrainer:
    """Velocity-model view of a bare denoiser during pretraining."""

    def __init__(self, net: DenoiserNet, schedule: DiffusionSchedule):
        self.net = net
        self.schedule = schedule
        self.null_token = net.null_token

    def velocity(self, which: str, x_t: Tensor, t: Tensor, condition: Tensor) -> Tensor:
        return self.net(x_t, t, condition, None)


def save_base(net: DenoiserNet, path: Union[str, Path], schedule: DiffusionSchedule, **extra: Any) -> int:
    tensors = {n: p.detach() for n, p in net.state_dict().items() if ".adapters." not in n}
    header = {"kind": "base", "schedule": schedule.to_dict(), "net": asdict(net.cfg), **extra}
    return save_checkpoint(path, tensors, header)
