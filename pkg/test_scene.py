import math

import numpy as np
import pytest
import torch

from splatrestore.errors import FormatError, InputError
from splatrestore.scene import (SH_C0, Camera, GaussianSet, build_covariance, load_bundle, load_ply,
                                project_gaussian, project_gaussians, quaternion_to_rotation, save_bundle,
                                save_ply, sh_basis, sh_to_color, synth_scene)


def _single(position=(0.0, 0.0, 0.0), log_scale=(-2.0, -2.0, -2.0), degree=0) -> GaussianSet:
    k = (degree + 1) ** 2
    return GaussianSet(
        positions=torch.tensor([position], dtype=torch.float64),
        rotations=torch.tensor([[1.0, 0.0, 0.0, 0.0]], dtype=torch.float64),
        log_scales=torch.tensor([log_scale], dtype=torch.float64),
        opacity_logits=torch.zeros(1, 1, dtype=torch.float64),
        sh_coeffs=torch.zeros(1, 3, k, dtype=torch.float64),
        sh_degree=degree,
    )


def test_sh_dc_only_color():
    coeffs = torch.zeros(3, 1)
    coeffs[:, 0] = torch.tensor([1.0, 0.0, -1.0])
    color = sh_to_color(coeffs, torch.tensor([0.0, 0.0, 1.0]), degree=0)
    expected = torch.tensor([0.5 + SH_C0, 0.5, 0.5 - SH_C0])
    torch.testing.assert_close(color, expected)


def test_sh_rejects_degree_above_stored_and_non_unit_direction():
    coeffs = torch.zeros(3, 4)
    with pytest.raises(InputError):
        sh_to_color(coeffs, torch.tensor([0.0, 0.0, 1.0]), degree=2)
    with pytest.raises(InputError):
        sh_to_color(coeffs, torch.tensor([0.0, 0.0, 2.0]), degree=1)


def test_sh_basis_is_orthonormal_on_the_sphere():
    # Monte Carlo estimate of the Gram matrix over uniform directions
    gen = torch.Generator().manual_seed(3)
    dirs = torch.nn.functional.normalize(torch.randn(200000, 3, generator=gen, dtype=torch.float64), dim=-1)
    basis = sh_basis(dirs, 3)
    gram = 4.0 * math.pi * basis.T @ basis / dirs.shape[0]
    torch.testing.assert_close(gram, torch.eye(16, dtype=torch.float64), atol=0.05, rtol=0)


def test_quaternion_rotation_is_orthonormal():
    q = torch.randn(32, 4, dtype=torch.float64)
    R = quaternion_to_rotation(q)
    eye = torch.eye(3, dtype=torch.float64).expand(32, 3, 3)
    torch.testing.assert_close(R @ R.transpose(-1, -2), eye)
    torch.testing.assert_close(torch.linalg.det(R), torch.ones(32, dtype=torch.float64))


def test_covariance_eigenvalues_are_squared_scales():
    q = torch.randn(16, 4, dtype=torch.float64)
    log_scales = torch.randn(16, 3, dtype=torch.float64) * 0.5
    eig = torch.linalg.eigvalsh(build_covariance(q, log_scales))
    expected = torch.sort(torch.exp(2.0 * log_scales), dim=-1).values
    torch.testing.assert_close(eig, expected)


def test_look_at_centers_target_and_culls_behind():
    cam = Camera.look_at((0.0, -3.0, 0.0), (0.0, 0.0, 0.0), width=64, height=48)
    np.testing.assert_allclose(cam.center, [0.0, -3.0, 0.0], atol=1e-12)
    screen = project_gaussians(_single(), cam)
    torch.testing.assert_close(screen.means2d[0], torch.tensor([32.0, 24.0], dtype=torch.float64))
    assert bool(screen.visible[0])
    assert float(screen.depths[0]) == pytest.approx(3.0)

    behind = project_gaussian(_single(position=(0.0, -5.0, 0.0)), 0, cam)
    assert not bool(behind.visible[0])
    assert bool(torch.isfinite(behind.cov2d).all())


def test_projected_covariance_includes_lowpass():
    cam = Camera.look_at((0.0, -3.0, 0.0), (0.0, 0.0, 0.0))
    gs = _single(log_scale=(-30.0, -30.0, -30.0))
    cov = project_gaussians(gs, cam, lowpass=0.3).cov2d[0]
    torch.testing.assert_close(cov, 0.3 * torch.eye(2, dtype=torch.float64))


def test_camera_validation():
    with pytest.raises(InputError):
        Camera(np.eye(3), np.zeros(3), fx=-1.0, fy=1.0, cx=0.0, cy=0.0, width=16, height=16)
    with pytest.raises(InputError):
        Camera(np.eye(3), np.zeros(3), fx=1.0, fy=1.0, cx=0.0, cy=0.0, width=4, height=16)


def test_gaussian_set_shape_validation():
    gs = _single()
    with pytest.raises(InputError):
        GaussianSet(positions=gs.positions, rotations=gs.rotations[:, :3], log_scales=gs.log_scales,
                    opacity_logits=gs.opacity_logits, sh_coeffs=gs.sh_coeffs, sh_degree=0)
    with pytest.raises(InputError):
        GaussianSet.empty().validate()


def test_ply_roundtrip_is_bit_exact(tmp_path, small_scene):
    gs = small_scene.gaussians
    path = tmp_path / "scene.ply"
    save_ply(gs, path)
    loaded = load_ply(path)
    assert loaded.sh_degree == gs.sh_degree
    assert loaded.equal(gs)


def test_ply_truncation_reports_offset(tmp_path, small_scene):
    path = tmp_path / "scene.ply"
    save_ply(small_scene.gaussians, path)
    data = path.read_bytes()
    path.write_bytes(data[:-10])
    with pytest.raises(FormatError) as err:
        load_ply(path)
    assert err.value.offset == len(data) - 10


def test_ply_missing_property(tmp_path):
    from plyfile import PlyData, PlyElement

    elements = np.zeros(2, dtype=[(name, "<f4") for name in ("x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2")])
    path = tmp_path / "bad.ply"
    PlyData([PlyElement.describe(elements, "vertex")], byte_order="<").write(str(path))
    with pytest.raises(FormatError) as err:
        load_ply(path)
    assert "opacity" in str(err.value)


def test_synth_scene_is_deterministic_with_disjoint_views():
    a = synth_scene(11, 128, 4, 2, image_size=32)
    b = synth_scene(11, 128, 4, 2, image_size=32)
    assert a.gaussians.equal(b.gaussians)
    assert a.gaussians.count == 128
    assert len(a.train_views) == 4 and len(a.test_views) == 2
    assert not any(t.same_as(v) for t in a.test_views for v in a.train_views)
    positions = a.gaussians.positions
    assert bool((positions.abs() <= 1.0 + 1e-6).all())


def test_synth_scene_rejects_unknown_style():
    with pytest.raises(InputError):
        synth_scene(0, 16, 1, 1, style="voxels")


def test_bundle_roundtrip(tmp_path, small_scene):
    save_bundle(small_scene, tmp_path / "scene_0")
    loaded = load_bundle(tmp_path / "scene_0")
    assert loaded.gaussians.equal(small_scene.gaussians)
    assert all(a.same_as(b) for a, b in zip(loaded.train_views, small_scene.train_views))
    assert loaded.metadata["scene_id"] == 0
    assert loaded.background == small_scene.background


def test_bundle_schema_violation(tmp_path, small_scene):
    save_bundle(small_scene, tmp_path)
    (tmp_path / "bundle.json").write_text('{"ply": "scene.ply"}')
    with pytest.raises(FormatError):
        load_bundle(tmp_path)


def test_degree_one_terms_are_odd_in_direction():
    gen = torch.Generator().manual_seed(4)
    coeffs = torch.zeros(3, 4, dtype=torch.float64)
    coeffs[:, 1:] = 0.1 * torch.randn(3, 3, generator=gen, dtype=torch.float64)
    dirs = torch.nn.functional.normalize(torch.randn(10, 3, generator=gen, dtype=torch.float64), dim=-1)
    for d in dirs:
        forward = sh_to_color(coeffs, d, degree=1) - 0.5
        backward = sh_to_color(coeffs, -d, degree=1) - 0.5
        torch.testing.assert_close(forward, -backward, atol=1e-12, rtol=0)
        assert float(forward.abs().max()) > 0.0


def test_projected_covariance_shrinks_with_depth():
    cam = Camera.look_at((0.0, -3.0, 0.0), (0.0, 0.0, 0.0))
    variances = []
    for y in (0.0, 2.0, 6.0):
        cov = project_gaussians(_single(position=(0.0, y, 0.0), log_scale=(-1.0, -1.0, -1.0)), cam).cov2d[0]
        variances.append(torch.diagonal(cov))
    assert bool((variances[0] > variances[1]).all())
    assert bool((variances[1] > variances[2]).all())


def test_ply_degree_is_inferred_from_rest_count(tmp_path):
    from plyfile import PlyData

    gen = torch.Generator().manual_seed(9)
    gs = GaussianSet(
        positions=torch.randn(5, 3, generator=gen),
        rotations=torch.randn(5, 4, generator=gen),
        log_scales=torch.randn(5, 3, generator=gen),
        opacity_logits=torch.randn(5, 1, generator=gen),
        sh_coeffs=torch.randn(5, 3, 16, generator=gen),
        sh_degree=3,
    )
    path = tmp_path / "deg3.ply"
    save_ply(gs, path)
    names = PlyData.read(str(path))["vertex"].data.dtype.names
    assert sum(name.startswith("f_rest_") for name in names) == 45
    loaded = load_ply(path)
    assert loaded.sh_degree == 3
    assert torch.equal(loaded.sh_coeffs, gs.sh_coeffs)


def test_synth_scene_renders_are_not_constant():
    from splatrestore.raster import render

    bundle = synth_scene(2, 2000, 1, 0, image_size=32)
    image = render(bundle.gaussians, bundle.train_views[0], bundle.background).image
    assert float(image.std()) > 0.01
