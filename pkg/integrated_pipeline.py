"""
Integrated compression and restoration pipeline.

One method per command-line stage. Every method writes the effective
configuration into its output directory before producing anything else.
"""

import json
import logging
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import torch

from compression import (FILE_SUFFIX, CompressOptions, compress, compress_levels, level_schedule,
                         read_coded_scene, write_coded_scene)
from evaluation import EvaluationOptions, rd_evaluate
from restoration.dataset import condition_for, load_manifest, synthesize_dataset, verify_manifest
from restoration.diffusion import (DiffusionSchedule, NetConfig, RestorerState, ZeroVelocity, build_denoiser,
                                   decode_latents, encode_latents, one_step_restore, pretrain_base, save_base)
from restoration.distill import DistillConfig, train
from splatrestore.errors import InputError, SplatRestoreError
from splatrestore.image_io import read_image, write_f32img, write_png
from splatrestore.metrics import RDReport
from splatrestore.raster import RasterSettings, render, render_backward, render_views
from splatrestore.scene import SceneBundle, load_bundle, save_bundle, save_ply, synth_scene
from splatrestore.settings import PipelineConfig

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def scene_seed(run_seed: int, index: int) -> int:
    return run_seed * 1000 + index


def apply_threads(threads: int) -> None:
    """``threads > 0`` pins torch's intra-op pool; exactly 1 also forces deterministic kernels."""
    if threads > 0:
        torch.set_num_threads(threads)
    if threads == 1:
        torch.use_deterministic_algorithms(True)


class IntegratedPipeline:
    """Runs each stage of the pipeline from a ``PipelineConfig``."""

    def __init__(self, config: Optional[PipelineConfig] = None):
        self.config = config or PipelineConfig()
        self.raster = RasterSettings.from_config(self.config.raster)
        apply_threads(self.config.run.threads)

    # -- helpers -----------------------------------------------------------

    def _out(self, out_dir: Optional[PathLike] = None, default: str = "") -> Path:
        path = Path(out_dir) if out_dir is not None else Path(self.config.run.out) / default
        self.config.write_effective(path)
        return path

    def _compress_options(self, background: Sequence[float]) -> CompressOptions:
        codec = self.config.codec
        return CompressOptions(finetune_iters=codec.finetune_iters, learning_rates=codec.learning_rates(),
                               seed=self.config.run.seed, background=tuple(background),
                               lambda_ssim=self.config.raster.lambda_ssim, settings=self.raster)

    def _schedule(self) -> DiffusionSchedule:
        d = self.config.diffusion
        return DiffusionSchedule(T=d.T, t0=d.t0, t_min=d.t_min, t_max=d.t_max)

    def _net_config(self) -> NetConfig:
        d = self.config.diffusion
        return NetConfig(channels=d.base_channels, rank=d.adapter_rank, scale=d.adapter_scale,
                         vocab_size=d.vocab_size)

    def _restorer(self, checkpoint: Optional[PathLike]):
        if checkpoint is None:
            logger.info("No restorer checkpoint given, using the zero-velocity passthrough")
            return ZeroVelocity(self._schedule(), self.config.diffusion.vocab_size)
        return RestorerState.load(checkpoint, seed=self.config.run.seed)

    @staticmethod
    def _scene_dirs(root: PathLike) -> List[Path]:
        root = Path(root)
        if (root / "bundle.json").exists():
            return [root]
        dirs = sorted((p for p in root.glob("scene_*") if (p / "bundle.json").exists()),
                      key=lambda p: int(p.name.split("_", 1)[1]))
        if not dirs:
            raise InputError(f"no scene bundles under {root}")
        return dirs

    def _load_scenes(self, root: PathLike) -> List[SceneBundle]:
        return [load_bundle(d) for d in self._scene_dirs(root)]

    # -- stages ------------------------------------------------------------

    def synth(self, out_dir: Optional[PathLike] = None) -> List[Path]:
        """Generate ``scene.n_scenes`` synthetic scene bundles."""
        try:
            out = self._out(out_dir, "scenes")
            s = self.config.scene
            paths = []
            for index in range(s.n_scenes):
                bundle = synth_scene(scene_seed(self.config.run.seed, index), s.n_primitives, s.n_train_views,
                                     s.n_test_views, style=s.style, image_size=s.image_size,
                                     sh_degree=s.sh_degree, background=s.background)
                bundle.metadata["scene_id"] = index
                save_bundle(bundle, out / f"scene_{index}")
                paths.append(out / f"scene_{index}")
            logger.info(f"Synthesized {len(paths)} scenes into {out}")
            return paths
        except SplatRestoreError as e:
            logger.error(f"Scene synthesis failed: {e}")
            raise

    def fit_check(self, scene_dir: PathLike, out_dir: Optional[PathLike] = None,
                  primitives: int = 4, eps: float = 1e-4) -> Dict[str, Any]:
        """Render every view to PNG and spot-check raster gradients against finite differences.

        Returns:
            Pixel statistics per view and the worst relative gradient error.
        """
        try:
            out = self._out(out_dir, "fit_check")
            bundle = load_bundle(scene_dir)
            stats = []
            views = [("train", i, c) for i, c in enumerate(bundle.train_views)]
            views += [("test", i, c) for i, c in enumerate(bundle.test_views)]
            for split, index, cam in views:
                result = render(bundle.gaussians, cam, bundle.background, settings=self.raster)
                write_png(result.image, out / f"{split}_{index}.png")
                stats.append({
                    "view": f"{split}_{index}",
                    "mean": float(result.image.mean()),
                    "min": float(result.image.min()),
                    "max": float(result.image.max()),
                    "coverage": float((result.alpha > 0.5).float().mean()),
                })
            worst = self._gradient_spot_check(bundle, primitives, eps)
            summary = {"views": stats, "max_gradient_rel_error": worst}
            (out / "fit_check.json").write_text(json.dumps(summary, indent=2) + "\n")
            logger.info(f"Rendered {len(stats)} views, worst gradient relative error {worst:.3e}")
            return summary
        except SplatRestoreError as e:
            logger.error(f"Fit check failed: {e}")
            raise

    def _gradient_spot_check(self, bundle: SceneBundle, primitives: int, eps: float) -> float:
        if not bundle.train_views:
            raise InputError("fit-check needs at least one training view")
        gs = bundle.gaussians.select(list(range(min(primitives, bundle.gaussians.count)))).to_dtype(torch.float64)
        cam = bundle.train_views[0]
        settings = replace(self.raster, alpha_min=0.0, transmittance_min=0.0)
        target = torch.full((cam.height, cam.width, 3), 0.5, dtype=torch.float64)
        analytic = render_backward(gs, cam, target, bundle.background, 0.0, settings).gradients["positions"]

        def loss_at(positions: torch.Tensor) -> float:
            moved = replace(gs, positions=positions)
            return render_backward(moved, cam, target, bundle.background, 0.0, settings).loss

        worst = 0.0
        for i in range(gs.count):
            for axis in range(3):
                plus = gs.positions.clone()
                minus = gs.positions.clone()
                plus[i, axis] += eps
                minus[i, axis] -= eps
                numeric = (loss_at(plus) - loss_at(minus)) / (2 * eps)
                exact = float(analytic[i, axis])
                error = abs(numeric - exact) / max(abs(numeric), abs(exact), 1e-8)
                if abs(numeric - exact) > 1e-5:
                    worst = max(worst, error)
        return worst

    def compress(self, scene_dir: PathLike, out_path: Optional[PathLike] = None,
                 level: Optional[int] = None) -> Path:
        """Compress one scene bundle to a ``.gsrc`` file at ``level`` (default ``codec.level``)."""
        try:
            codec = self.config.codec
            level = codec.level if level is None else level
            bundle = load_bundle(scene_dir)
            if out_path is None:
                out_path = self._out(None, "coded") / f"level_{level}{FILE_SUFFIX}"
            out_path = Path(out_path)
            self.config.write_effective(out_path.parent)
            targets = render_views(bundle.gaussians, bundle.train_views, bundle.background, self.raster)
            schedule = level_schedule(bundle.gaussians.count, min(codec.c_min, bundle.gaussians.count), codec.levels)
            coded = compress(bundle.gaussians, schedule, level, bundle.train_views, targets,
                             finetune_iters=codec.finetune_iters, options=self._compress_options(bundle.background))
            size = write_coded_scene(coded, out_path)
            logger.info(f"Wrote {out_path} ({size} bytes, {coded.count} primitives)")
            return out_path
        except SplatRestoreError as e:
            logger.error(f"Compression failed: {e}")
            raise

    def decompress(self, coded_path: PathLike, out_path: Optional[PathLike] = None) -> Path:
        """Decode a ``.gsrc`` file into a PLY."""
        try:
            coded = read_coded_scene(coded_path)
            out_path = Path(out_path) if out_path is not None else Path(coded_path).with_suffix(".ply")
            self.config.write_effective(out_path.parent)
            save_ply(coded.gaussians(), out_path)
            logger.info(f"Decoded level {coded.level} with {coded.count} primitives to {out_path}")
            return out_path
        except SplatRestoreError as e:
            logger.error(f"Decompression failed: {e}")
            raise

    def make_dataset(self, scenes_root: PathLike, out_dir: Optional[PathLike] = None,
                     levels: Optional[Sequence[int]] = None):
        """Render clean/degraded training pairs for every scene under ``scenes_root``."""
        try:
            scenes = self._load_scenes(scenes_root)
            out = self._out(out_dir, "dataset")
            codec = self.config.codec
            levels = list(levels) if levels is not None else list(range(codec.levels))
            background = scenes[0].background
            return synthesize_dataset(scenes, levels, out, c_min=codec.c_min, n_levels=codec.levels,
                                      options=self._compress_options(background), settings=self.raster,
                                      seed=self.config.run.seed, vocab_size=self.config.diffusion.vocab_size,
                                      generation={"scenes_root": str(scenes_root)})
        except SplatRestoreError as e:
            logger.error(f"Dataset synthesis failed: {e}")
            raise

    def pretrain_base(self, dataset_dir: PathLike, out_path: Optional[PathLike] = None) -> Path:
        """Train the frozen base denoiser on the dataset's clean images."""
        try:
            manifest = load_manifest(dataset_dir)
            verify_manifest(manifest)
            seen = set()
            images, conditions = [], []
            for record in manifest.pairs:
                key = (record["scene"], record["view"])
                if key in seen:
                    continue
                seen.add(key)
                pair = manifest.load_pair(record)
                images.append(pair.clean)
                conditions.append(pair.condition)
            d = self.config.diffusion
            out_path = Path(out_path) if out_path is not None else self._out(None, "base") / "base.ckpt"
            self.config.write_effective(out_path.parent)
            net = build_denoiser(self._net_config(), self.config.run.seed)
            losses = pretrain_base(net, encode_latents(torch.stack(images)), torch.tensor(conditions),
                                   d.pretrain_steps, lr=d.pretrain_lr, batch_size=d.pretrain_batch,
                                   seed=self.config.run.seed, cond_dropout=d.cond_dropout,
                                   schedule=self._schedule(), log_every=self.config.distill.log_every)
            save_base(net, out_path, self._schedule(), steps=len(losses))
            logger.info(f"Pretrained base on {len(images)} images, saved {out_path}")
            return out_path
        except SplatRestoreError as e:
            logger.error(f"Base pretraining failed: {e}")
            raise

    def train_restorer(self, dataset_dir: PathLike, base_checkpoint: PathLike,
                       out_dir: Optional[PathLike] = None) -> Path:
        """Distill the restorer and critic adapters on top of a base checkpoint."""
        try:
            out = self._out(out_dir, "restorer")
            manifest = load_manifest(dataset_dir)
            verify_manifest(manifest)
            state = RestorerState.load(base_checkpoint, seed=self.config.run.seed)
            state, reports = train(manifest, state, DistillConfig.from_settings(self.config), out)
            path = out / "restorer.ckpt"
            state.save(path, step=len(reports))
            logger.info(f"Trained restorer for {len(reports)} steps, saved {path}")
            return path
        except SplatRestoreError as e:
            logger.error(f"Restorer training failed: {e}")
            raise

    def restore(self, inputs: Sequence[PathLike], restorer_checkpoint: Optional[PathLike] = None,
                out_dir: Optional[PathLike] = None, level: Optional[int] = None,
                deterministic_eps: Optional[float] = None, condition: Optional[int] = None) -> List[Path]:
        """One-step restoration of images or of a scene's compressed test-view renders.

        Args:
            inputs: A scene directory, or ``.png`` / ``.f32img`` files
            restorer_checkpoint: Restorer to use (zero-velocity passthrough when omitted)
            out_dir: Output directory
            level: Rate level for scene inputs (default ``codec.level``)
            deterministic_eps: Scale of the projection noise (0 disables it)
            condition: Class label for image inputs (default: the null token)

        Returns:
            Paths of the written ``.f32img`` files (a PNG is written next to each).
        """
        try:
            out = self._out(out_dir, "restored")
            model = self._restorer(restorer_checkpoint)
            names, images, labels = self._restore_inputs(inputs, level, condition, model.null_token)
            latents = encode_latents(torch.stack(images))
            generator = torch.Generator().manual_seed(self.config.run.seed)
            noise = torch.randn(latents.shape, generator=generator)
            noise_scale = 1.0 if deterministic_eps is None else deterministic_eps
            with torch.no_grad():
                restored = one_step_restore(model, latents, noise, torch.tensor(labels),
                                            self.config.distill.cfg_scale, t0=self.config.diffusion.t0,
                                            noise_scale=noise_scale)
            paths = []
            for name, image in zip(names, decode_latents(restored)):
                write_png(image, out / f"{name}.png")
                path = out / f"{name}.f32img"
                write_f32img(image, path)
                paths.append(path)
            logger.info(f"Restored {len(paths)} images into {out}")
            return paths
        except SplatRestoreError as e:
            logger.error(f"Restoration failed: {e}")
            raise

    def _restore_inputs(self, inputs: Sequence[PathLike], level: Optional[int], condition: Optional[int],
                        null_token: int):
        if not inputs:
            raise InputError("nothing to restore")
        first = Path(inputs[0])
        if len(inputs) == 1 and first.is_dir():
            bundle = load_bundle(first)
            codec = self.config.codec
            level = codec.level if level is None else level
            gs = bundle.gaussians
            schedule = level_schedule(gs.count, min(codec.c_min, gs.count), codec.levels)
            targets = render_views(gs, bundle.train_views, bundle.background, self.raster)
            coded = compress_levels(gs, schedule, bundle.train_views, targets,
                                    self._compress_options(bundle.background), lowest_level=level)[level]
            images = render_views(coded.gaussians(), bundle.test_views, bundle.background, self.raster)
            if not images:
                raise InputError(f"scene {first} has no test views")
            label = condition_for(int(bundle.metadata.get("scene_id", 0)), self.config.diffusion.vocab_size)
            names = [f"test_{i}_level_{level}" for i in range(len(images))]
            return names, images, [label] * len(images)
        images = [read_image(p)[..., :3] for p in inputs]
        label = null_token if condition is None else condition
        return [Path(p).stem for p in inputs], images, [label] * len(images)

    def evaluate(self, scenes_root: PathLike, restorer_checkpoint: Optional[PathLike] = None,
                 out_dir: Optional[PathLike] = None, levels: Optional[Sequence[int]] = None,
                 img2img_steps: int = 0) -> RDReport:
        """Rate-distortion evaluation on held-out views; writes ``rd_report.json`` and ``rd_report.csv``."""
        try:
            out = self._out(out_dir, "evaluation")
            scenes = self._load_scenes(scenes_root)
            restorer = self._restorer(restorer_checkpoint) if restorer_checkpoint is not None else None
            codec = self.config.codec
            options = EvaluationOptions(c_min=codec.c_min, levels=codec.levels,
                                        compress=self._compress_options(scenes[0].background),
                                        t0=self.config.diffusion.t0, cfg_scale=self.config.distill.cfg_scale,
                                        seed=self.config.run.seed, vocab_size=self.config.diffusion.vocab_size,
                                        img2img_steps=img2img_steps, settings=self.raster)
            report = rd_evaluate(scenes, restorer, levels, options)
            report.to_json(out / "rd_report.json")
            report.to_csv(out / "rd_report.csv")
            logger.info(f"Wrote rate-distortion report for {len(scenes)} scenes to {out}")
            return report
        except SplatRestoreError as e:
            logger.error(f"Evaluation failed: {e}")
            raise
