"""
Gaussian scene model.

Holds the primitive set, the pinhole camera, spherical-harmonic colour,
screen-space projection, PLY interchange and the procedural scene generator.

Conventions:
    - quaternions are stored (w, x, y, z) and renormalized before use
    - scales are stored as logs, opacities as logits
    - ``sh_coeffs`` is N x 3 x (deg+1)^2 with the DC term first
    - cameras follow OpenCV: x right, y down, z forward; world up is +z
"""

import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import jsonschema
import numpy as np
import torch
from plyfile import PlyData, PlyElement

from .errors import FormatError, InputError

logger = logging.getLogger(__name__)

Tensor = torch.Tensor

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)
MAX_SH_DEGREE = 3
DEFAULT_LOWPASS = 0.3


def sh_coefficient_count(degree: int) -> int:
    return (degree + 1) ** 2


def sh_degree_for(count: int) -> int:
    """Infer the SH degree from a per-channel coefficient count."""
    for degree in range(MAX_SH_DEGREE + 1):
        if sh_coefficient_count(degree) == count:
            return degree
    raise InputError(f"{count} SH coefficients per channel match no degree in 0..{MAX_SH_DEGREE}")


def rgb_to_sh(rgb: Tensor) -> Tensor:
    return (rgb - 0.5) / SH_C0


def sh_basis(dirs: Tensor, degree: int) -> Tensor:
    """Real SH basis up to ``degree`` for unit directions (..., 3) -> (..., (deg+1)^2)."""
    x, y, z = dirs.unbind(-1)
    terms = [torch.full_like(x, SH_C0)]
    if degree >= 1:
        terms += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        terms += [
            SH_C2[0] * xy,
            SH_C2[1] * yz,
            SH_C2[2] * (2.0 * zz - xx - yy),
            SH_C2[3] * xz,
            SH_C2[4] * (xx - yy),
        ]
        if degree >= 3:
            terms += [
                SH_C3[0] * y * (3.0 * xx - yy),
                SH_C3[1] * xy * z,
                SH_C3[2] * y * (4.0 * zz - xx - yy),
                SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
                SH_C3[4] * x * (4.0 * zz - xx - yy),
                SH_C3[5] * z * (xx - yy),
                SH_C3[6] * x * (xx - 3.0 * yy),
            ]
    return torch.stack(terms, dim=-1)


def sh_to_color(coeffs: Tensor, view_dir: Tensor, degree: int, check_norm: bool = True) -> Tensor:
    """Evaluate view-dependent colour.

    Args:
        coeffs: (..., 3, K) coefficients, DC first
        view_dir: (..., 3) unit directions from the camera to the primitive
        degree: Degree to evaluate, at most the stored degree
        check_norm: Verify that every direction has unit length within 1e-6

    Returns:
        (..., 3) colour, clamped to [0, 1]
    """
    if degree < 0 or sh_coefficient_count(degree) > coeffs.shape[-1]:
        raise InputError(
            f"SH degree {degree} exceeds the stored degree {sh_degree_for(coeffs.shape[-1])}"
        )
    if check_norm:
        norms = torch.linalg.vector_norm(view_dir.detach().double(), dim=-1)
        if bool(((norms - 1.0).abs() > 1e-6).any()):
            raise InputError("view direction must have unit length within 1e-6")
    basis = sh_basis(view_dir, degree)
    k = basis.shape[-1]
    value = (coeffs[..., :k] * basis.unsqueeze(-2)).sum(dim=-1)
    return torch.clamp(value + 0.5, 0.0, 1.0)


def quaternion_to_rotation(quaternions: Tensor) -> Tensor:
    """Rotation matrices (N, 3, 3) from (w, x, y, z) quaternions, normalized first."""
    q = torch.nn.functional.normalize(quaternions, dim=-1)
    w, x, y, z = q.unbind(-1)
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]
    return torch.stack(rows, dim=-1).reshape(*q.shape[:-1], 3, 3)


def build_covariance(rotations: Tensor, log_scales: Tensor) -> Tensor:
    """World-space covariance R S S^T R^T for every primitive."""
    R = quaternion_to_rotation(rotations)
    M = R * torch.exp(log_scales).unsqueeze(-2)
    return M @ M.transpose(-1, -2)


@dataclass(frozen=True, eq=False)
class GaussianSet:
    """A set of anisotropic Gaussian primitives in their optimization parameterization."""

    positions: Tensor
    rotations: Tensor
    log_scales: Tensor
    opacity_logits: Tensor
    sh_coeffs: Tensor
    sh_degree: int

    ATTRIBUTES = ("positions", "rotations", "log_scales", "opacity_logits", "sh_coeffs")

    def __post_init__(self):
        n = self.positions.shape[0]
        expected = {
            "positions": (n, 3),
            "rotations": (n, 4),
            "log_scales": (n, 3),
            "opacity_logits": (n, 1),
            "sh_coeffs": (n, 3, sh_coefficient_count(self.sh_degree)),
        }
        if not 0 <= self.sh_degree <= MAX_SH_DEGREE:
            raise InputError(f"sh_degree must be in 0..{MAX_SH_DEGREE}, got {self.sh_degree}")
        for name, shape in expected.items():
            if tuple(getattr(self, name).shape) != shape:
                raise InputError(f"{name} has shape {tuple(getattr(self, name).shape)}, expected {shape}")

    @property
    def count(self) -> int:
        return int(self.positions.shape[0])

    def __len__(self) -> int:
        return self.count

    @property
    def dtype(self) -> torch.dtype:
        return self.positions.dtype

    @property
    def opacities(self) -> Tensor:
        return torch.sigmoid(self.opacity_logits)

    @property
    def scales(self) -> Tensor:
        return torch.exp(self.log_scales)

    def validate(self) -> "GaussianSet":
        """Check the invariants required of a stored scene."""
        if self.count < 1:
            raise InputError("a Gaussian set needs at least one primitive")
        for name in self.ATTRIBUTES:
            if not bool(torch.isfinite(getattr(self, name)).all()):
                raise InputError(f"{name} contains non-finite values")
        return self

    def attributes(self) -> Dict[str, Tensor]:
        return {name: getattr(self, name) for name in self.ATTRIBUTES}

    @classmethod
    def from_attributes(cls, attributes: Dict[str, Tensor], sh_degree: int) -> "GaussianSet":
        return cls(sh_degree=sh_degree, **{name: attributes[name] for name in cls.ATTRIBUTES})

    @classmethod
    def empty(cls, sh_degree: int = 0, dtype: torch.dtype = torch.float32) -> "GaussianSet":
        k = sh_coefficient_count(sh_degree)
        return cls(
            positions=torch.zeros(0, 3, dtype=dtype),
            rotations=torch.zeros(0, 4, dtype=dtype),
            log_scales=torch.zeros(0, 3, dtype=dtype),
            opacity_logits=torch.zeros(0, 1, dtype=dtype),
            sh_coeffs=torch.zeros(0, 3, k, dtype=dtype),
            sh_degree=sh_degree,
        )

    def select(self, indices: Union[Tensor, Sequence[int]]) -> "GaussianSet":
        index = torch.as_tensor(indices, dtype=torch.long)
        return GaussianSet.from_attributes(
            {name: value[index] for name, value in self.attributes().items()}, self.sh_degree
        )

    def detached(self) -> "GaussianSet":
        return GaussianSet.from_attributes(
            {name: value.detach().clone() for name, value in self.attributes().items()}, self.sh_degree
        )

    def with_grad(self) -> "GaussianSet":
        """Fresh leaf copies of every attribute with ``requires_grad`` set."""
        return GaussianSet.from_attributes(
            {name: value.detach().clone().requires_grad_(True) for name, value in self.attributes().items()},
            self.sh_degree,
        )

    def to_dtype(self, dtype: torch.dtype) -> "GaussianSet":
        return GaussianSet.from_attributes(
            {name: value.to(dtype) for name, value in self.attributes().items()}, self.sh_degree
        )

    def equal(self, other: "GaussianSet") -> bool:
        """Bitwise equality of every attribute."""
        return self.sh_degree == other.sh_degree and all(
            torch.equal(a, b) for a, b in zip(self.attributes().values(), other.attributes().values())
        )


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera with a world-to-camera rigid transform.

    ``rotation`` and ``translation`` map world points into camera space:
    ``p_cam = rotation @ p_world + translation``.
    """

    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        rotation = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.array(self.translation, dtype=np.float64).reshape(3)
        rotation.setflags(write=False)
        translation.setflags(write=False)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)
        if self.fx <= 0 or self.fy <= 0:
            raise InputError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not 0 < self.near < self.far:
            raise InputError(f"need 0 < near < far, got near={self.near}, far={self.far}")
        if self.width < 8 or self.height < 8:
            raise InputError(f"image must be at least 8x8, got {self.width}x{self.height}")

    @classmethod
    def look_at(cls, eye: Sequence[float], target: Sequence[float], up: Sequence[float] = (0.0, 0.0, 1.0),
                fov_deg: float = 50.0, width: int = 64, height: int = 64,
                near: float = 0.01, far: float = 100.0) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            raise InputError("look_at: up vector is parallel to the viewing direction")
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rotation = np.stack([right, down, forward])
        focal = 0.5 * width / math.tan(math.radians(fov_deg) / 2.0)
        return cls(rotation=rotation, translation=-rotation @ eye, fx=focal, fy=focal,
                   cx=width / 2.0, cy=height / 2.0, width=width, height=height, near=near, far=far)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def same_as(self, other: "Camera") -> bool:
        return self.to_dict() == other.to_dict()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "fx": float(self.fx), "fy": float(self.fy),
            "cx": float(self.cx), "cy": float(self.cy),
            "width": int(self.width), "height": int(self.height),
            "near": float(self.near), "far": float(self.far),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Camera":
        return cls(**data)


@dataclass(frozen=True, eq=False)
class ScreenGaussians:
    """Projected primitives for one camera. Culled entries carry finite placeholder values."""

    means2d: Tensor
    cov2d: Tensor
    depths: Tensor
    visible: Tensor

    def __len__(self) -> int:
        return int(self.depths.shape[0])


def project_gaussians(gs: GaussianSet, cam: Camera, lowpass: float = DEFAULT_LOWPASS) -> ScreenGaussians:
    """Project every primitive onto the image plane of ``cam``.

    The screen covariance is J W Sigma W^T J^T plus ``lowpass`` on the diagonal,
    with J the local affine Jacobian of the perspective map at the primitive centre.
    """
    dtype = gs.dtype
    W = torch.as_tensor(cam.rotation, dtype=dtype)
    t = torch.as_tensor(cam.translation, dtype=dtype)
    p_cam = gs.positions @ W.T + t
    x, y, z = p_cam.unbind(-1)
    visible = (z > cam.near) & (z < cam.far)
    z_safe = torch.where(visible, z, torch.ones_like(z))

    zeros = torch.zeros_like(z_safe)
    J = torch.stack([
        cam.fx / z_safe, zeros, -cam.fx * x / (z_safe * z_safe),
        zeros, cam.fy / z_safe, -cam.fy * y / (z_safe * z_safe),
    ], dim=-1).reshape(-1, 2, 3)
    T = J @ W
    sigma = build_covariance(gs.rotations, gs.log_scales)
    cov2d = T @ sigma @ T.transpose(-1, -2)
    cov2d = cov2d + lowpass * torch.eye(2, dtype=dtype)
    means2d = torch.stack([cam.fx * x / z_safe + cam.cx, cam.fy * y / z_safe + cam.cy], dim=-1)
    return ScreenGaussians(means2d=means2d, cov2d=cov2d, depths=z, visible=visible)


def project_gaussian(gs: GaussianSet, index: int, cam: Camera,
                     lowpass: float = DEFAULT_LOWPASS) -> ScreenGaussians:
    """Project a single primitive; the result holds one entry."""
    if not 0 <= index < gs.count:
        raise InputError(f"primitive index {index} out of range for {gs.count} primitives")
    return project_gaussians(gs.select([index]), cam, lowpass)


def primitive_colors(gs: GaussianSet, cam: Camera) -> Tensor:
    """Per-primitive RGB as seen from the camera centre."""
    center = torch.as_tensor(cam.center, dtype=gs.dtype)
    dirs = torch.nn.functional.normalize(gs.positions - center, dim=-1)
    return sh_to_color(gs.sh_coeffs, dirs, gs.sh_degree, check_norm=False)


# ---------------------------------------------------------------------------
# PLY interchange
# ---------------------------------------------------------------------------

_PLY_SIZES = {
    "char": 1, "uchar": 1, "int8": 1, "uint8": 1,
    "short": 2, "ushort": 2, "int16": 2, "uint16": 2,
    "int": 4, "uint": 4, "int32": 4, "uint32": 4,
    "float": 4, "float32": 4, "double": 8, "float64": 8,
}


def _ply_property_names(degree: int) -> List[str]:
    rest = 3 * (sh_coefficient_count(degree) - 1)
    names = ["x", "y", "z", "nx", "ny", "nz"]
    names += [f"f_dc_{i}" for i in range(3)]
    names += [f"f_rest_{i}" for i in range(rest)]
    names += ["opacity"]
    names += [f"scale_{i}" for i in range(3)]
    names += [f"rot_{i}" for i in range(4)]
    return names


def _check_ply_layout(data: bytes) -> None:
    """Validate the header and payload size of a binary little-endian vertex PLY."""
    marker = b"end_header\n"
    end = data.find(marker)
    if not data.startswith(b"ply\n") or end < 0:
        raise FormatError("missing PLY header", 0 if not data.startswith(b"ply\n") else len(data))
    offset = 0
    vertex_count = None
    record = 0
    in_vertex = False
    for raw in data[:end].split(b"\n"):
        line = raw.decode("ascii", errors="replace").strip()
        tokens = line.split()
        if tokens[:1] == ["format"] and tokens[1:2] != ["binary_little_endian"]:
            raise FormatError(f"unsupported PLY format '{line}'", offset)
        if tokens[:1] == ["element"]:
            in_vertex = tokens[1:2] == ["vertex"]
            if in_vertex:
                try:
                    vertex_count = int(tokens[2])
                except (IndexError, ValueError):
                    raise FormatError(f"malformed element line '{line}'", offset) from None
        elif tokens[:1] == ["property"] and in_vertex:
            if len(tokens) != 3 or tokens[1] not in _PLY_SIZES:
                raise FormatError(f"unsupported property line '{line}'", offset)
            record += _PLY_SIZES[tokens[1]]
        offset += len(raw) + 1
    if vertex_count is None:
        raise FormatError("PLY header declares no vertex element", end)
    body = end + len(marker)
    needed = body + vertex_count * record
    if len(data) < needed:
        raise FormatError(f"truncated vertex payload, expected {needed} bytes in total", len(data))


def load_ply(path: Union[str, Path]) -> GaussianSet:
    """Read a 3DGS-layout PLY; the SH degree is inferred from the f_rest count.

    Raises:
        FormatError: Malformed header, truncated payload or a missing property
    """
    path = Path(path)
    data = path.read_bytes()
    _check_ply_layout(data)
    try:
        ply = PlyData.read(io.BytesIO(data))
    except Exception as e:
        raise FormatError(f"could not parse {path}: {e}") from None
    vertex = ply["vertex"]
    names = set(vertex.data.dtype.names)
    rest_names = sorted((n for n in names if n.startswith("f_rest_")), key=lambda n: int(n.split("_")[-1]))
    if len(rest_names) % 3:
        raise FormatError(f"{len(rest_names)} f_rest properties is not a multiple of 3")
    degree = sh_degree_for(len(rest_names) // 3 + 1)
    for name in _ply_property_names(degree):
        if name not in names and not name.startswith("n"):
            raise FormatError(f"PLY is missing property '{name}'")

    def columns(keys: Sequence[str]) -> Tensor:
        stacked = np.stack([np.asarray(vertex[k], dtype=np.float32) for k in keys], axis=1)
        return torch.from_numpy(np.ascontiguousarray(stacked))

    n = len(vertex.data)
    k = sh_coefficient_count(degree)
    dc = columns([f"f_dc_{i}" for i in range(3)]).reshape(n, 3, 1)
    if rest_names:
        rest = columns(rest_names).reshape(n, 3, k - 1)
        sh = torch.cat([dc, rest], dim=2)
    else:
        sh = dc
    gs = GaussianSet(
        positions=columns(["x", "y", "z"]),
        rotations=columns([f"rot_{i}" for i in range(4)]),
        log_scales=columns([f"scale_{i}" for i in range(3)]),
        opacity_logits=columns(["opacity"]),
        sh_coeffs=sh.contiguous(),
        sh_degree=degree,
    )
    logger.debug(f"Loaded {n} primitives (SH degree {degree}) from {path}")
    return gs.validate()


def save_ply(gs: GaussianSet, path: Union[str, Path]) -> None:
    """Write ``gs`` as a binary little-endian PLY in the 3DGS property layout."""
    gs.validate()
    n = gs.count
    columns = np.concatenate([
        gs.positions.detach().cpu().numpy(),
        np.zeros((n, 3), dtype=np.float32),
        gs.sh_coeffs[:, :, 0].detach().cpu().numpy(),
        gs.sh_coeffs[:, :, 1:].detach().cpu().reshape(n, -1).numpy(),
        gs.opacity_logits.detach().cpu().numpy(),
        gs.log_scales.detach().cpu().numpy(),
        gs.rotations.detach().cpu().numpy(),
    ], axis=1).astype(np.float32)
    names = _ply_property_names(gs.sh_degree)
    elements = np.empty(n, dtype=[(name, "<f4") for name in names])
    for i, name in enumerate(names):
        elements[name] = columns[:, i]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PlyData([PlyElement.describe(elements, "vertex")], byte_order="<").write(str(path))


# ---------------------------------------------------------------------------
# Scene bundles
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SceneBundle:
    """A scene with its training and held-out cameras."""

    gaussians: GaussianSet
    train_views: Tuple[Camera, ...]
    test_views: Tuple[Camera, ...]
    background: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "train_views", tuple(self.train_views))
        object.__setattr__(self, "test_views", tuple(self.test_views))
        object.__setattr__(self, "background", tuple(float(c) for c in self.background))
        for test in self.test_views:
            if any(test.same_as(train) for train in self.train_views):
                raise InputError("train and test views must be disjoint")

    def background_tensor(self, dtype: torch.dtype = torch.float32) -> Tensor:
        return torch.tensor(self.background, dtype=dtype)


_CAMERA_SCHEMA = {
    "type": "object",
    "required": ["rotation", "translation", "fx", "fy", "cx", "cy", "width", "height", "near", "far"],
    "additionalProperties": False,
    "properties": {
        "rotation": {"type": "array", "minItems": 3, "maxItems": 3,
                     "items": {"type": "array", "minItems": 3, "maxItems": 3, "items": {"type": "number"}}},
        "translation": {"type": "array", "minItems": 3, "maxItems": 3, "items": {"type": "number"}},
        "fx": {"type": "number", "exclusiveMinimum": 0},
        "fy": {"type": "number", "exclusiveMinimum": 0},
        "cx": {"type": "number"},
        "cy": {"type": "number"},
        "width": {"type": "integer", "minimum": 8},
        "height": {"type": "integer", "minimum": 8},
        "near": {"type": "number", "exclusiveMinimum": 0},
        "far": {"type": "number"},
    },
}

BUNDLE_SCHEMA = {
    "type": "object",
    "required": ["ply", "background", "train_views", "test_views"],
    "properties": {
        "ply": {"type": "string"},
        "background": {"type": "array", "minItems": 3, "maxItems": 3, "items": {"type": "number"}},
        "train_views": {"type": "array", "items": _CAMERA_SCHEMA},
        "test_views": {"type": "array", "items": _CAMERA_SCHEMA},
        "metadata": {"type": "object"},
    },
}


def save_bundle(bundle: SceneBundle, directory: Union[str, Path]) -> Path:
    """Write ``scene.ply`` and ``bundle.json`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_ply(bundle.gaussians, directory / "scene.ply")
    manifest = {
        "ply": "scene.ply",
        "background": list(bundle.background),
        "train_views": [cam.to_dict() for cam in bundle.train_views],
        "test_views": [cam.to_dict() for cam in bundle.test_views],
        "metadata": bundle.metadata,
    }
    path = directory / "bundle.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_bundle(directory: Union[str, Path]) -> SceneBundle:
    directory = Path(directory)
    path = directory / "bundle.json"
    if not path.exists():
        raise InputError(f"no bundle.json in {directory}")
    try:
        manifest = json.loads(path.read_text())
        jsonschema.validate(manifest, BUNDLE_SCHEMA)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path} is not valid JSON: {e.msg}", e.pos) from None
    except jsonschema.ValidationError as e:
        raise FormatError(f"{path} failed validation: {e.message}") from None
    return SceneBundle(
        gaussians=load_ply(directory / manifest["ply"]),
        train_views=[Camera.from_dict(c) for c in manifest["train_views"]],
        test_views=[Camera.from_dict(c) for c in manifest["test_views"]],
        background=tuple(manifest["background"]),
        metadata=manifest.get("metadata", {}),
    )


# ---------------------------------------------------------------------------
# Procedural scenes
# ---------------------------------------------------------------------------

def _inverse_sigmoid(p: np.ndarray) -> np.ndarray:
    return np.log(p / (1.0 - p))


def _textured_boxes(rng: np.random.Generator, n: int) -> Tuple[np.ndarray, ...]:
    """Flat primitives scattered over the faces of a few checkered boxes."""
    n_boxes = int(min(max(1, n // 64), rng.integers(3, 6)))
    half = rng.uniform(0.15, 0.4, size=(n_boxes, 3))
    centers = rng.uniform(-1.0 + half, 1.0 - half)
    colors = rng.uniform(0.1, 0.9, size=(n_boxes, 2, 3))

    # every face of every box, weighted by area
    faces = [(b, axis, sign) for b in range(n_boxes) for axis in range(3) for sign in (-1.0, 1.0)]
    areas = np.array([4.0 * np.prod(np.delete(half[b], axis)) for b, axis, _ in faces])
    picks = rng.choice(len(faces), size=n, p=areas / areas.sum())
    in_plane = float(np.clip(0.6 * math.sqrt(areas.sum() / n), 0.015, 0.15))

    positions = np.empty((n, 3))
    log_scales = np.empty((n, 3))
    rgb = np.empty((n, 3))
    uv = rng.uniform(-1.0, 1.0, size=(n, 3))
    for i, face_index in enumerate(picks):
        b, axis, sign = faces[face_index]
        local = uv[i] * half[b]
        local[axis] = sign * half[b, axis]
        positions[i] = centers[b] + local
        log_scales[i] = math.log(in_plane)
        log_scales[i, axis] = math.log(0.005)
        cell = np.floor(np.delete(local, axis) / 0.1).astype(int).sum() % 2
        rgb[i] = colors[b, cell]
    rgb = np.clip(rgb + rng.normal(0.0, 0.02, size=rgb.shape), 0.0, 1.0)
    rotations = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    opacity = _inverse_sigmoid(rng.uniform(0.8, 0.95, size=(n, 1)))
    return positions, rotations, log_scales, opacity, rgb


def _random_blobs(rng: np.random.Generator, n: int) -> Tuple[np.ndarray, ...]:
    positions = np.clip(rng.normal(0.0, 0.45, size=(n, 3)), -1.0, 1.0)
    rotations = rng.normal(size=(n, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    log_scales = np.log(rng.uniform(0.02, 0.12, size=(n, 3)))
    opacity = _inverse_sigmoid(rng.uniform(0.3, 0.9, size=(n, 1)))
    rgb = rng.uniform(0.05, 0.95, size=(n, 3))
    return positions, rotations, log_scales, opacity, rgb


def ring_cameras(center: np.ndarray, count: int, elevation_deg: float, radius: float = 3.5,
                 azimuth_offset_deg: float = 0.0, image_size: int = 64,
                 fov_deg: float = 50.0) -> List[Camera]:
    """Cameras evenly spaced on a horizontal ring, all looking at ``center``."""
    cameras = []
    elevation = math.radians(elevation_deg)
    for i in range(count):
        azimuth = math.radians(azimuth_offset_deg + 360.0 * i / count)
        eye = center + radius * np.array([
            math.cos(elevation) * math.cos(azimuth),
            math.cos(elevation) * math.sin(azimuth),
            math.sin(elevation),
        ])
        cameras.append(Camera.look_at(eye, center, fov_deg=fov_deg, width=image_size, height=image_size))
    return cameras


def synth_scene(seed: int, n_primitives: int, n_train_views: int, n_test_views: int,
                style: str = "textured-boxes", image_size: int = 64, sh_degree: int = 1,
                background: Sequence[float] = (0.0, 0.0, 0.0)) -> SceneBundle:
    """Generate a deterministic synthetic scene.

    Training cameras sit on a ring at 20 degrees of elevation; test cameras
    sit on a second ring at 35 degrees, so the two sets never coincide.
    """
    if n_primitives < 1:
        raise InputError(f"n_primitives must be at least 1, got {n_primitives}")
    if n_train_views < 0 or n_test_views < 0:
        raise InputError("view counts must be non-negative")
    if style not in ("textured-boxes", "random-blobs"):
        raise InputError(f"unknown scene style '{style}'")
    rng = np.random.default_rng(seed)
    generator = _textured_boxes if style == "textured-boxes" else _random_blobs
    positions, rotations, log_scales, opacity, rgb = generator(rng, n_primitives)

    k = sh_coefficient_count(sh_degree)
    sh = np.zeros((n_primitives, 3, k))
    sh[:, :, 0] = (rgb - 0.5) / SH_C0
    if k > 1:
        sh[:, :, 1:] = rng.normal(0.0, 0.02, size=(n_primitives, 3, k - 1))

    def as_tensor(a: np.ndarray) -> Tensor:
        return torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))

    gs = GaussianSet(
        positions=as_tensor(positions),
        rotations=as_tensor(rotations),
        log_scales=as_tensor(log_scales),
        opacity_logits=as_tensor(opacity),
        sh_coeffs=as_tensor(sh),
        sh_degree=sh_degree,
    )
    center = positions.mean(axis=0)
    train = ring_cameras(center, n_train_views, 20.0, image_size=image_size)
    test = ring_cameras(center, n_test_views, 35.0, azimuth_offset_deg=180.0 / max(n_test_views, 1),
                        image_size=image_size)
    logger.debug(f"Synthesized scene seed={seed} style={style} with {n_primitives} primitives")
    return SceneBundle(gaussians=gs, train_views=train, test_views=test, background=tuple(background),
                       metadata={"seed": seed, "style": style})
