"""Gaussian scene model, differentiable rasterizer and shared infrastructure."""

from .errors import CorruptStreamError, FormatError, InputError, NumericalError, ShapeError, SplatRestoreError
from .scene import Camera, GaussianSet, SceneBundle, load_bundle, load_ply, save_bundle, save_ply, synth_scene

__version__ = "1.0.0"

__all__ = [
    'Camera', 'CorruptStreamError', 'FormatError', 'GaussianSet', 'InputError', 'NumericalError',
    'SceneBundle', 'ShapeError', 'SplatRestoreError', 'load_bundle', 'load_ply', 'save_bundle',
    'save_ply', 'synth_scene',
]
