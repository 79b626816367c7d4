"""
Image files.

f32img layout (little-endian)::

    magic   b"F32I"
    u32     height
    u32     width
    u32     channels
    f32     payload, row-major H x W x C
"""

import logging
import struct
from pathlib import Path
from typing import Union

import numpy as np
import torch
from PIL import Image

from .binary import ByteReader
from .errors import FormatError, ShapeError

logger = logging.getLogger(__name__)

F32IMG_MAGIC = b"F32I"
F32IMG_SUFFIX = ".f32img"


def _as_array(image: Union[torch.Tensor, np.ndarray]) -> np.ndarray:
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().numpy()
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError(f"expected an H x W x C image, got shape {image.shape}")
    return image


def f32img_bytes(image: Union[torch.Tensor, np.ndarray]) -> bytes:
    arr = np.ascontiguousarray(_as_array(image), dtype="<f4")
    return F32IMG_MAGIC + struct.pack("<III", *arr.shape) + arr.tobytes(order="C")


def write_f32img(image: Union[torch.Tensor, np.ndarray], path: Union[str, Path]) -> int:
    """Write a float image losslessly; returns the number of bytes written."""
    data = f32img_bytes(image)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return len(data)


def read_f32img(path: Union[str, Path]) -> torch.Tensor:
    """Read an f32img file as a float32 H x W x C tensor.

    Raises:
        FormatError: Bad magic, truncated payload or trailing bytes
    """
    reader = ByteReader(Path(path).read_bytes(), "f32img")
    reader.expect(F32IMG_MAGIC)
    height, width, channels = reader.unpack("III")
    payload = reader.take(4 * height * width * channels)
    reader.finish()
    arr = np.frombuffer(payload, dtype="<f4").reshape(height, width, channels)
    return torch.from_numpy(arr.astype(np.float32))


def to_uint8(image: Union[torch.Tensor, np.ndarray]) -> np.ndarray:
    """Clamp to [0, 1] and round half up to 8 bits."""
    arr = np.clip(_as_array(image).astype(np.float64), 0.0, 1.0)
    return np.floor(arr * 255.0 + 0.5).astype(np.uint8)


def write_png(image: Union[torch.Tensor, np.ndarray], path: Union[str, Path]) -> None:
    arr = to_uint8(image)
    if arr.shape[2] not in (1, 3, 4):
        raise ShapeError(f"PNG needs 1, 3 or 4 channels, got {arr.shape[2]}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr[:, :, 0] if arr.shape[2] == 1 else arr).save(path, format="PNG")


def read_png(path: Union[str, Path]) -> torch.Tensor:
    """Read a PNG as a float32 H x W x 3 tensor in [0, 1]."""
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as e:
        raise FormatError(f"unreadable PNG {path}: {e}") from None
    return torch.from_numpy(arr)


def read_image(path: Union[str, Path]) -> torch.Tensor:
    """Read a ``.png`` or ``.f32img`` file."""
    suffix = Path(path).suffix.lower()
    if suffix == F32IMG_SUFFIX:
        return read_f32img(path)
    if suffix == ".png":
        return read_png(path)
    raise FormatError(f"unsupported image type '{suffix}' for {path}")
