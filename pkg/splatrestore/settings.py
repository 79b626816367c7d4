"""
Pipeline configuration, environment overrides and logging setup.

Every tunable lives in one pydantic model so that config files, command-line
flags and the effective-config snapshot written next to every output all share
one schema. Unknown keys are rejected in every section.
"""

import argparse
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union, get_args, get_origin

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import InputError

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'
DEFAULT_CONFIG_PATH = Path(__file__).resolve().parent.parent / "config" / "pipeline_defaults.json"

ENV_LOG_LEVEL = "SPLATRESTORE_LOG_LEVEL"
ENV_CONFIG = "SPLATRESTORE_CONFIG"
ENV_THREADS = "SPLATRESTORE_THREADS"

SECTIONS = ("scene", "raster", "codec", "diffusion", "distill", "run")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class SceneSettings(_Section):
    """Synthetic scene generation."""

    n_scenes: int = Field(20, ge=1, description="number of synthetic scenes")
    n_primitives: int = Field(2048, ge=1, description="primitives per full-rate scene")
    n_train_views: int = Field(8, ge=1, description="training cameras per scene")
    n_test_views: int = Field(4, ge=0, description="held-out cameras per scene")
    image_size: int = Field(64, ge=8, description="square render resolution in pixels")
    sh_degree: int = Field(1, ge=0, le=3, description="spherical harmonic degree")
    style: Literal["textured-boxes", "random-blobs"] = Field("textured-boxes", description="scene generator")
    background: List[float] = Field(default_factory=lambda: [0.0, 0.0, 0.0], description="RGB background")

    @model_validator(mode="after")
    def _check_background(self) -> "SceneSettings":
        if len(self.background) != 3 or any(not 0.0 <= c <= 1.0 for c in self.background):
            raise ValueError(f"background must be 3 values in [0, 1], got {self.background}")
        return self


class RenderSettings(_Section):
    """Compositing thresholds and the rendering loss."""

    alpha_min: float = Field(1.0 / 255.0, ge=0.0, lt=1.0, description="skip contributions below this alpha")
    alpha_max: float = Field(0.99, gt=0.0, le=1.0, description="per-primitive alpha cap")
    transmittance_min: float = Field(1e-4, ge=0.0, lt=1.0, description="stop compositing below this T")
    lowpass: float = Field(0.3, ge=0.0, description="screen covariance floor in px^2")
    tile_size: int = Field(16, ge=1, description="culling tile edge in pixels")
    lambda_ssim: float = Field(0.2, ge=0.0, le=1.0, description="SSIM weight in the rendering loss")


class CodecSettings(_Section):
    """Rate schedule, pruning fine-tune and the level chosen by ``compress``."""

    c_min: int = Field(256, ge=1, description="primitive count of the lowest rate level")
    levels: int = Field(3, ge=2, description="number of rate levels")
    level: int = Field(0, ge=0, description="level written by the compress command")
    finetune_iters: int = Field(200, ge=0, description="fine-tune iterations after each prune")
    lr_positions: float = Field(1.6e-5, ge=0.0)
    lr_rotations: float = Field(1e-3, ge=0.0)
    lr_log_scales: float = Field(5e-3, ge=0.0)
    lr_opacity: float = Field(2.5e-2, ge=0.0)
    lr_sh: float = Field(2.5e-3, ge=0.0)

    @model_validator(mode="after")
    def _check_level(self) -> "CodecSettings":
        if self.level >= self.levels:
            raise ValueError(f"codec.level {self.level} must be below codec.levels {self.levels}")
        return self

    def learning_rates(self) -> Dict[str, float]:
        return {
            "positions": self.lr_positions,
            "rotations": self.lr_rotations,
            "log_scales": self.lr_log_scales,
            "opacity_logits": self.lr_opacity,
            "sh_coeffs": self.lr_sh,
        }


class DiffusionSettings(_Section):
    """Noise schedule, denoiser size and base pretraining."""

    T: int = Field(1000, ge=2, description="number of diffusion steps")
    t0: int = Field(199, ge=1, description="intermediate state for one-step restoration")
    t_min: int = Field(20, ge=1)
    t_max: int = Field(980, ge=1)
    base_channels: int = Field(32, ge=8, description="width of the denoiser")
    adapter_rank: int = Field(8, ge=1, description="low-rank adapter rank")
    adapter_scale: float = Field(1.0, gt=0.0)
    vocab_size: int = Field(16, ge=1, description="condition classes, null token excluded")
    pretrain_steps: int = Field(5000, ge=0)
    pretrain_lr: float = Field(2e-4, gt=0.0)
    pretrain_batch: int = Field(8, ge=1)
    cond_dropout: float = Field(0.1, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _check_times(self) -> "DiffusionSettings":
        if not 0 < self.t0 < self.T:
            raise ValueError(f"t0 must lie in (0, T), got t0={self.t0}, T={self.T}")
        if not 0 < self.t_min < self.t_max < self.T:
            raise ValueError(f"need 0 < t_min < t_max < T, got {self.t_min}, {self.t_max}, {self.T}")
        return self


class DistillSettings(_Section):
    """Distribution matching distillation of the restorer."""

    alpha: float = Field(0.7, ge=0.0, le=1.0, description="weight of the critic term")
    cfg_scale: float = Field(7.5, description="classifier-free guidance scale")
    lambda_l2: float = Field(1.0, ge=0.0)
    lambda_perc: float = Field(1.0, ge=0.0)
    lr_scale: float = Field(100.0, gt=0.0, description="multiplier on the 5e-6 / 1e-6 adapter rates")
    weight_decay: float = Field(1e-4, ge=0.0)
    clip_norm: float = Field(1.0, gt=0.0)
    steps: int = Field(2000, ge=0)
    batch_size: int = Field(4, ge=1)
    checkpoint_every: int = Field(500, ge=1)
    log_every: int = Field(50, ge=1)


class RunSettings(_Section):
    """Process-wide options."""

    seed: int = Field(0, ge=0)
    threads: int = Field(0, ge=0, description="torch threads, 0 keeps the default, 1 is deterministic")
    out: str = Field("outputs", description="output directory")
    log_level: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = "INFO"


class PipelineConfig(BaseModel):
    """Complete configuration of the pipeline."""

    model_config = ConfigDict(extra="forbid")

    scene: SceneSettings = Field(default_factory=SceneSettings)
    raster: RenderSettings = Field(default_factory=RenderSettings)
    codec: CodecSettings = Field(default_factory=CodecSettings)
    diffusion: DiffusionSettings = Field(default_factory=DiffusionSettings)
    distill: DistillSettings = Field(default_factory=DistillSettings)
    run: RunSettings = Field(default_factory=RunSettings)

    def to_dict(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")

    def write_effective(self, out_dir: Union[str, Path]) -> Path:
        """Write ``config.effective.json`` into ``out_dir``."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "config.effective.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def configure_logging(level: str = "INFO") -> None:
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT, force=True)


def load_environment() -> Dict[str, str]:
    """Load ``.env`` and return the recognised overrides that are set."""
    load_dotenv()
    return {key: os.environ[key] for key in (ENV_LOG_LEVEL, ENV_CONFIG, ENV_THREADS) if os.environ.get(key)}


def load_config(path: Optional[Union[str, Path]] = None) -> PipelineConfig:
    """Read a JSON config file, falling back to the bundled defaults.

    Raises:
        InputError: The file is missing, not JSON, or fails validation
    """
    path = Path(path) if path else DEFAULT_CONFIG_PATH
    if not path.exists():
        if path == DEFAULT_CONFIG_PATH:
            logger.warning(f"Default config {path} not found, using built-in defaults")
            return PipelineConfig()
        raise InputError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise InputError(f"config file {path} is not valid JSON: {e}") from None
    return validate_config(data, source=str(path))


def validate_config(data: Dict[str, Any], source: str = "config") -> PipelineConfig:
    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as e:
        raise InputError(f"invalid {source}: {e}") from None


def _section_model(section: str) -> type:
    return PipelineConfig.model_fields[section].annotation


def flag_name(section: str, field: str) -> str:
    return f"--{section}-{field}".replace("_", "-")


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got '{text}'")


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    """Add one ``--section-field`` flag per config key, plus the common aliases."""
    common = parser.add_argument_group("common")
    common.add_argument("--config", default=None, help="JSON config file (default: bundled defaults)")
    common.add_argument("--seed", dest="run__seed", type=int, default=None, help="alias of --run-seed")
    common.add_argument("--threads", dest="run__threads", type=int, default=None, help="alias of --run-threads")
    common.add_argument("--out", dest="run__out", default=None, help="alias of --run-out")

    for section in SECTIONS:
        group = parser.add_argument_group(f"{section} settings")
        for field, info in _section_model(section).model_fields.items():
            kwargs: Dict[str, Any] = {"dest": f"{section}__{field}", "default": None}
            annotation = info.annotation
            if get_origin(annotation) is Literal:
                kwargs["choices"] = list(get_args(annotation))
            elif get_origin(annotation) in (list, List):
                kwargs["nargs"] = "+"
                kwargs["type"] = get_args(annotation)[0]
            elif annotation is bool:
                kwargs["type"] = _parse_bool
            else:
                kwargs["type"] = annotation
            default = info.get_default(call_default_factory=True)
            description = info.description or field.replace("_", " ")
            kwargs["help"] = f"{description} (default: {default})"
            group.add_argument(flag_name(section, field), **kwargs)


def apply_overrides(config: PipelineConfig, args: argparse.Namespace,
                    env: Optional[Dict[str, str]] = None) -> PipelineConfig:
    """Return a copy of ``config`` with environment and flag overrides applied.

    Flags win over environment variables, which win over the file.
    """
    data = config.to_dict()
    env = env or {}
    if ENV_LOG_LEVEL in env:
        data["run"]["log_level"] = env[ENV_LOG_LEVEL].upper()
    if ENV_THREADS in env:
        try:
            data["run"]["threads"] = int(env[ENV_THREADS])
        except ValueError:
            raise InputError(f"{ENV_THREADS} must be an integer, got '{env[ENV_THREADS]}'") from None
    for key, value in vars(args).items():
        if "__" not in key or value is None:
            continue
        section, field = key.split("__", 1)
        if section in data:
            data[section][field] = value
    return validate_config(data, source="configuration overrides")
