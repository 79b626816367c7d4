"""One-step diffusion restoration of compressed-scene renders."""

from .dataset import (DatasetManifest, TrainingPair, condition_for, iter_epoch, load_manifest, sample_batch,
                      synthesize_dataset, verify_manifest)
from .diffusion import (DenoiserNet, DiffusionSchedule, NetConfig, RestorerState, ZeroVelocity, build_denoiser,
                        denoised_estimate, euler_sample, forward_diffuse, img2img_restore, one_step_restore,
                        predict, pretrain_base, save_base)
from .distill import DistillConfig, StepReport, dmd_gradient, perceptual, phi_minus_step, phi_plus_step, train

__all__ = [
    'DatasetManifest', 'DenoiserNet', 'DiffusionSchedule', 'DistillConfig', 'NetConfig', 'RestorerState',
    'StepReport', 'TrainingPair', 'ZeroVelocity', 'build_denoiser', 'condition_for', 'denoised_estimate',
    'dmd_gradient', 'euler_sample', 'forward_diffuse', 'img2img_restore', 'iter_epoch', 'load_manifest',
    'one_step_restore', 'perceptual', 'phi_minus_step', 'phi_plus_step', 'predict', 'pretrain_base',
    'sample_batch', 'save_base', 'synthesize_dataset', 'train', 'verify_manifest',
]
