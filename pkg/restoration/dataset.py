"""
Artifact synthesis: clean/degraded training pairs rendered through the codec.

Layout under the dataset root::

    manifest.json
    scene_<id>/level_<l>/scene.gsrc
    scene_<id>/level_<l>/view_<v>.clean.f32img
    scene_<id>/level_<l>/view_<v>.degraded.f32img
"""

import hashlib
import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Union

import jsonschema
import numpy as np
import torch

from compression import FILE_SUFFIX, CompressOptions, compress_levels, level_schedule, write_coded_scene
from splatrestore.errors import FormatError, InputError, SplatRestoreError
from splatrestore.image_io import read_f32img, write_f32img
from splatrestore.raster import RasterSettings, render_views
from splatrestore.scene import SceneBundle

from .diffusion import encode_latents

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1

_PAIR_SCHEMA = {
    "type": "object",
    "required": ["scene", "view", "level", "condition", "clean", "degraded", "clean_sha256", "degraded_sha256"],
    "properties": {
        "scene": {"type": "integer", "minimum": 0},
        "view": {"type": "integer", "minimum": 0},
        "level": {"type": "integer", "minimum": 0},
        "condition": {"type": "integer", "minimum": 0},
        "clean": {"type": "string"},
        "degraded": {"type": "string"},
        "clean_sha256": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "degraded_sha256": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
    },
}

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["version", "seed", "vocab_size", "levels", "pairs", "coded", "generation"],
    "properties": {
        "version": {"const": MANIFEST_VERSION},
        "seed": {"type": "integer"},
        "vocab_size": {"type": "integer", "minimum": 1},
        "levels": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "pairs": {"type": "array", "items": _PAIR_SCHEMA},
        "coded": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["scene", "level", "path", "bytes", "sha256"],
            },
        },
        "generation": {"type": "object"},
    },
}


def condition_for(scene_id: int, vocab_size: int = 16) -> int:
    """Stable class label of a scene: SHA-256 of its decimal id, modulo the vocabulary."""
    if vocab_size < 1:
        raise InputError(f"vocab_size must be positive, got {vocab_size}")
    digest = hashlib.sha256(str(int(scene_id)).encode("ascii")).hexdigest()
    return int(digest, 16) % vocab_size


def file_sha256(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass(frozen=True, eq=False)
class TrainingPair:
    """A degraded render and its clean counterpart from the same camera."""

    degraded: torch.Tensor
    clean: torch.Tensor
    scene_id: int
    view_id: int
    level: int
    condition: int

    def __post_init__(self):
        if self.degraded.shape != self.clean.shape:
            raise InputError(f"degraded {tuple(self.degraded.shape)} and clean {tuple(self.clean.shape)} "
                             f"images differ for scene {self.scene_id} view {self.view_id}")


@dataclass
class DatasetManifest:
    """Index of every pair and coded scene under ``root``."""

    root: Path
    seed: int
    vocab_size: int
    levels: List[int]
    pairs: List[Dict[str, Any]] = field(default_factory=list)
    coded: List[Dict[str, Any]] = field(default_factory=list)
    generation: Dict[str, Any] = field(default_factory=dict)

    @property
    def scene_ids(self) -> List[int]:
        return sorted({record["scene"] for record in self.pairs})

    def pairs_for(self, scene_id: int) -> List[Dict[str, Any]]:
        return [record for record in self.pairs if record["scene"] == scene_id]

    def __len__(self) -> int:
        return len(self.pairs)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "version": MANIFEST_VERSION,
            "seed": self.seed,
            "vocab_size": self.vocab_size,
            "levels": list(self.levels),
            "pairs": self.pairs,
            "coded": self.coded,
            "generation": self.generation,
        }

    def save(self) -> Path:
        path = self.root / MANIFEST_NAME
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    def load_pair(self, record: Dict[str, Any]) -> TrainingPair:
        return TrainingPair(
            degraded=read_f32img(self.root / record["degraded"]),
            clean=read_f32img(self.root / record["clean"]),
            scene_id=record["scene"],
            view_id=record["view"],
            level=record["level"],
            condition=record["condition"],
        )


def load_manifest(path: Union[str, Path]) -> DatasetManifest:
    """Load ``manifest.json`` from a dataset root (or the file itself).

    Raises:
        FormatError: The manifest is not valid JSON or fails schema validation
    """
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise InputError(f"no dataset manifest at {path}")
    try:
        data = json.loads(path.read_text())
        jsonschema.validate(data, MANIFEST_SCHEMA)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path} is not valid JSON: {e.msg}", e.pos) from None
    except jsonschema.ValidationError as e:
        raise FormatError(f"{path} failed validation: {e.message}") from None
    return DatasetManifest(root=path.parent, seed=data["seed"], vocab_size=data["vocab_size"],
                           levels=data["levels"], pairs=data["pairs"], coded=data["coded"],
                           generation=data["generation"])


def verify_manifest(manifest: DatasetManifest) -> int:
    """Re-check the existence and checksum of every indexed file.

    Returns:
        Number of files verified.

    Raises:
        FormatError: A file is missing or its checksum differs
    """
    checked = 0
    entries = [(r["clean"], r["clean_sha256"]) for r in manifest.pairs]
    entries += [(r["degraded"], r["degraded_sha256"]) for r in manifest.pairs]
    entries += [(r["path"], r["sha256"]) for r in manifest.coded]
    for relative, expected in entries:
        path = manifest.root / relative
        if not path.exists():
            raise FormatError(f"dataset file {relative} is missing")
        if file_sha256(path) != expected:
            raise FormatError(f"checksum mismatch for dataset file {relative}")
        checked += 1
    logger.info(f"Verified {checked} dataset files under {manifest.root}")
    return checked


def synthesize_dataset(scenes: Sequence[SceneBundle], levels: Sequence[int], out_dir: Union[str, Path],
                       c_min: int = 256, n_levels: int = 3, options: Optional[CompressOptions] = None,
                       settings: Optional[RasterSettings] = None, seed: int = 0, vocab_size: int = 16,
                       generation: Optional[Dict[str, Any]] = None) -> DatasetManifest:
    """Render clean and codec-degraded training views for every scene and level.

    Args:
        scenes: Scene bundles with training views
        levels: Rate levels to degrade with
        out_dir: Dataset root
        c_min: Cardinality of the lowest level
        n_levels: Number of levels in the schedule
        options: Cascade options; the seed is taken from ``seed``
        settings: Rasterizer thresholds
        seed: Seed for fine-tuning inside the cascade
        vocab_size: Condition vocabulary
        generation: Extra parameters recorded in the manifest

    Returns:
        The written manifest.

    Raises:
        InputError: A scene has no training views or a level is out of range
    """
    out_dir = Path(out_dir)
    levels = sorted(set(int(level) for level in levels))
    if not levels:
        raise InputError("at least one level is required")
    if levels[0] < 0 or levels[-1] >= n_levels:
        raise InputError(f"levels {levels} outside 0..{n_levels - 1}")
    if (out_dir / MANIFEST_NAME).exists():
        raise InputError(f"{out_dir} already holds a dataset")

    options = options or CompressOptions(settings=settings)
    manifest = DatasetManifest(root=out_dir, seed=seed, vocab_size=vocab_size, levels=levels,
                               generation={"c_min": c_min, "n_levels": n_levels,
                                           "finetune_iters": options.finetune_iters, **(generation or {})})
    created: List[Path] = []
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        for index, bundle in enumerate(scenes):
            scene_id = int(bundle.metadata.get("scene_id", index))
            if not bundle.train_views:
                raise InputError(f"scene {scene_id} has no training views")
            scene_dir = out_dir / f"scene_{scene_id}"
            if scene_dir.exists():
                raise InputError(f"duplicate scene id {scene_id}")
            created.append(scene_dir)
            _synthesize_scene(manifest, bundle, scene_id, scene_dir, levels, c_min, n_levels,
                              options, settings, seed)
        manifest.save()
    except (SplatRestoreError, OSError) as e:
        logger.error(f"Dataset synthesis failed, removing partial output: {e}")
        for path in created:
            shutil.rmtree(path, ignore_errors=True)
        (out_dir / MANIFEST_NAME).unlink(missing_ok=True)
        raise
    logger.info(f"Wrote {len(manifest)} pairs from {len(scenes)} scenes to {out_dir}")
    return manifest


def _synthesize_scene(manifest: DatasetManifest, bundle: SceneBundle, scene_id: int, scene_dir: Path,
                      levels: List[int], c_min: int, n_levels: int, options: CompressOptions,
                      settings: Optional[RasterSettings], seed: int) -> None:
    gs = bundle.gaussians
    background = bundle.background
    clean = render_views(gs, bundle.train_views, background, settings)
    schedule = level_schedule(gs.count, min(c_min, gs.count), n_levels)
    scene_options = CompressOptions(finetune_iters=options.finetune_iters, learning_rates=options.learning_rates,
                                    seed=seed, background=background, lambda_ssim=options.lambda_ssim,
                                    settings=settings)
    coded = compress_levels(gs, schedule, bundle.train_views, clean, scene_options, lowest_level=levels[0])
    condition = condition_for(scene_id, manifest.vocab_size)

    for level in levels:
        level_dir = scene_dir / f"level_{level}"
        coded_path = level_dir / f"scene{FILE_SUFFIX}"
        size = write_coded_scene(coded[level], coded_path)
        manifest.coded.append({
            "scene": scene_id, "level": level, "path": coded_path.relative_to(manifest.root).as_posix(),
            "bytes": size, "sha256": file_sha256(coded_path),
        })
        degraded = render_views(coded[level].gaussians(), bundle.train_views, background, settings)
        for view, (clean_image, degraded_image) in enumerate(zip(clean, degraded)):
            clean_path = level_dir / f"view_{view}.clean.f32img"
            degraded_path = level_dir / f"view_{view}.degraded.f32img"
            write_f32img(clean_image, clean_path)
            write_f32img(degraded_image, degraded_path)
            manifest.pairs.append({
                "scene": scene_id, "view": view, "level": level, "condition": condition,
                "clean": clean_path.relative_to(manifest.root).as_posix(),
                "degraded": degraded_path.relative_to(manifest.root).as_posix(),
                "clean_sha256": file_sha256(clean_path),
                "degraded_sha256": file_sha256(degraded_path),
            })
        logger.info(f"Scene {scene_id} level {level}: {coded[level].count} primitives, {size} bytes")


def sample_batch(manifest: DatasetManifest, batch_size: int, rng: np.random.Generator) -> List[TrainingPair]:
    """Draw ``batch_size`` distinct scenes, then one random (view, level) pair from each.

    Raises:
        InputError: The manifest holds fewer scenes than ``batch_size``
    """
    scene_ids = manifest.scene_ids
    if batch_size < 1:
        raise InputError(f"batch_size must be positive, got {batch_size}")
    if batch_size > len(scene_ids):
        raise InputError(f"batch of {batch_size} needs at least as many scenes, manifest has {len(scene_ids)}")
    chosen = rng.choice(len(scene_ids), size=batch_size, replace=False)
    return [_random_pair(manifest, scene_ids[int(i)], rng) for i in chosen]


def _random_pair(manifest: DatasetManifest, scene_id: int, rng: np.random.Generator) -> TrainingPair:
    records = manifest.pairs_for(scene_id)
    return manifest.load_pair(records[int(rng.integers(len(records)))])


def iter_epoch(manifest: DatasetManifest, batch_size: int, rng: np.random.Generator) -> Iterator[List[TrainingPair]]:
    """Yield batches that together visit every scene exactly once.

    The last batch is smaller when the scene count is not a multiple of ``batch_size``.
    """
    if batch_size < 1:
        raise InputError(f"batch_size must be positive, got {batch_size}")
    scene_ids = manifest.scene_ids
    order = rng.permutation(len(scene_ids))
    for start in range(0, len(order), batch_size):
        yield [_random_pair(manifest, scene_ids[int(i)], rng) for i in order[start:start + batch_size]]


def stack_batch(pairs: Sequence[TrainingPair]):
    """Stack a batch into (degraded, clean) B x 3 x H x W latents and B condition labels."""
    if not pairs:
        raise InputError("empty batch")
    degraded = encode_latents(torch.stack([p.degraded for p in pairs]))
    clean = encode_latents(torch.stack([p.clean for p in pairs]))
    conditions = torch.tensor([p.condition for p in pairs], dtype=torch.long)
    return degraded, clean, conditions
