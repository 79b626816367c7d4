from dataclasses import replace

import pytest
import torch

from splatrestore.errors import ShapeError
from splatrestore.raster import (RasterSettings, primitive_saliency, render, render_backward, rendering_loss,
                                 render_views)
from splatrestore.scene import SH_C0, Camera, GaussianSet

# no hard thresholds inside a finite-difference interval
EXACT = RasterSettings(alpha_min=0.0, transmittance_min=0.0)


def _camera(size: int = 32, height: int = None) -> Camera:
    return Camera.look_at((0.0, -3.0, 0.0), (0.0, 0.0, 0.0), width=size, height=height or size)


def _gaussians(positions, rgb, opacity=0.5, log_scale=-2.0, dtype=torch.float64) -> GaussianSet:
    n = len(positions)
    sh = torch.zeros(n, 3, 1, dtype=dtype)
    sh[:, :, 0] = (torch.tensor(rgb, dtype=dtype) - 0.5) / SH_C0
    logit = torch.logit(torch.tensor(opacity, dtype=dtype))
    return GaussianSet(
        positions=torch.tensor(positions, dtype=dtype),
        rotations=torch.tensor([[1.0, 0.0, 0.0, 0.0]] * n, dtype=dtype),
        log_scales=torch.full((n, 3), log_scale, dtype=dtype),
        opacity_logits=logit.expand(n, 1).clone(),
        sh_coeffs=sh,
        sh_degree=0,
    )


def _random_scene(seed: int, n: int = 5) -> GaussianSet:
    gen = torch.Generator().manual_seed(seed)
    k = 4
    return GaussianSet(
        positions=(torch.rand(n, 3, generator=gen, dtype=torch.float64) - 0.5) * 0.8,
        rotations=torch.randn(n, 4, generator=gen, dtype=torch.float64),
        log_scales=torch.log(0.08 + 0.1 * torch.rand(n, 3, generator=gen, dtype=torch.float64)),
        opacity_logits=torch.randn(n, 1, generator=gen, dtype=torch.float64) * 0.5,
        sh_coeffs=torch.randn(n, 3, k, generator=gen, dtype=torch.float64) * 0.1,
        sh_degree=1,
    )


def test_single_primitive_center_pixel():
    cam = _camera(64, 48)
    gs = _gaussians([(0.0, 0.0, 0.0)], [(0.5, 0.5, 0.5)], opacity=0.5)
    out = render(gs, cam, background=(0.0, 0.0, 0.0))
    assert out.image.shape == (48, 64, 3)
    torch.testing.assert_close(out.image[24, 32], torch.full((3,), 0.25, dtype=torch.float64))
    assert float(out.alpha[24, 32]) == pytest.approx(0.5)


def test_front_primitive_occludes_back():
    cam = _camera(32)
    gs = _gaussians([(0.0, 0.5, 0.0), (0.0, -0.5, 0.0)], [(0.0, 0.0, 1.0), (1.0, 0.0, 0.0)], opacity=0.6)
    pixel = render(gs, cam, settings=EXACT).image[16, 16]
    # the red primitive sits nearer the camera at y = -3
    front, back = 0.6, 0.6
    assert float(pixel[0]) == pytest.approx(front, abs=1e-9)
    assert float(pixel[2]) == pytest.approx((1.0 - front) * back, abs=1e-9)


def test_background_shows_through_transmittance():
    cam = _camera(32)
    gs = _gaussians([(0.0, 0.0, 0.0)], [(0.0, 0.0, 0.0)], opacity=0.5)
    out = render(gs, cam, background=(1.0, 1.0, 1.0))
    torch.testing.assert_close(out.image[16, 16], torch.full((3,), 0.5, dtype=torch.float64))
    torch.testing.assert_close(out.image[0, 0], torch.ones(3, dtype=torch.float64))


def test_empty_set_renders_background():
    cam = _camera(16)
    out = render(GaussianSet.empty(), cam, background=(0.2, 0.4, 0.6))
    torch.testing.assert_close(out.image, torch.tensor([0.2, 0.4, 0.6]).expand(16, 16, 3))
    assert float(out.alpha.abs().max()) == 0.0


def test_tiling_does_not_change_the_image(small_scene):
    cam = small_scene.train_views[0]
    gs = small_scene.gaussians
    tiled = render(gs, cam, settings=RasterSettings(tile_size=8)).image
    whole = render(gs, cam, settings=RasterSettings(tile_size=64)).image
    torch.testing.assert_close(tiled, whole, atol=1e-6, rtol=0)


def test_rendering_loss_zero_for_identical_images(small_scene):
    image = render(small_scene.gaussians, small_scene.train_views[0]).image
    assert float(rendering_loss(image, image)) == pytest.approx(0.0, abs=1e-6)
    with pytest.raises(ShapeError):
        rendering_loss(image, image[:-1])


def test_render_backward_rejects_wrong_target_shape():
    cam = _camera(32)
    gs = _gaussians([(0.0, 0.0, 0.0)], [(0.5, 0.5, 0.5)])
    with pytest.raises(ShapeError):
        render_backward(gs, cam, torch.zeros(16, 16, 3, dtype=torch.float64))


@pytest.mark.parametrize("seed", [*range(4), *(pytest.param(s, marks=pytest.mark.slow) for s in range(4, 20))])
def test_gradients_match_central_differences(seed):
    cam = _camera(32)
    gs = _random_scene(seed)
    gen = torch.Generator().manual_seed(100 + seed)
    target = torch.rand(32, 32, 3, generator=gen, dtype=torch.float64)
    analytic = render_backward(gs, cam, target, lambda_ssim=0.2, settings=EXACT).gradients
    eps = 1e-6

    def loss_of(name: str, value: torch.Tensor) -> float:
        moved = replace(gs, **{name: value})
        return float(rendering_loss(render(moved, cam, settings=EXACT).image, target, 0.2))

    for name in GaussianSet.ATTRIBUTES:
        base = getattr(gs, name)
        flat_count = base.numel()
        for flat in torch.randperm(flat_count, generator=gen)[:4].tolist():
            plus = base.clone().reshape(-1)
            minus = base.clone().reshape(-1)
            plus[flat] += eps
            minus[flat] -= eps
            numeric = (loss_of(name, plus.reshape(base.shape)) - loss_of(name, minus.reshape(base.shape))) / (2 * eps)
            exact = float(analytic[name].reshape(-1)[flat])
            assert abs(numeric - exact) <= 1e-5 + 1e-2 * abs(exact), (name, flat, numeric, exact)


def test_saliency_is_zero_for_primitives_behind_the_camera():
    cam = _camera(32)
    gs = _gaussians([(0.0, 0.0, 0.0), (0.0, -6.0, 0.0)], [(0.8, 0.2, 0.2), (0.2, 0.8, 0.2)])
    target = torch.zeros(32, 32, 3, dtype=torch.float64)
    scores = primitive_saliency(gs, [cam], [target])
    assert scores.shape == (2,)
    assert float(scores[0]) > 0.0
    assert float(scores[1]) == 0.0


def test_render_views_matches_render(small_scene):
    images = render_views(small_scene.gaussians, small_scene.test_views, small_scene.background)
    assert len(images) == len(small_scene.test_views)
    assert torch.equal(images[1], render(small_scene.gaussians, small_scene.test_views[1],
                                         small_scene.background).image)


def test_two_half_opaque_primitives_composite_over_background():
    cam = _camera(32)
    gs = _gaussians([(0.0, -0.5, 0.0), (0.0, 0.5, 0.0)], [(1.0, 0.0, 0.0), (0.0, 0.0, 1.0)], opacity=0.5)
    pixel = render(gs, cam, background=(0.0, 1.0, 0.0), settings=EXACT).image[16, 16]
    # 0.5 * front + 0.25 * back + 0.25 * background
    torch.testing.assert_close(pixel, torch.tensor([0.5, 0.25, 0.25], dtype=torch.float64), atol=1e-9, rtol=0)


@pytest.mark.parametrize("seed", range(3))
def test_render_is_invariant_to_primitive_order(seed):
    cam = _camera(32)
    gs = _random_scene(seed, n=8)
    perm = torch.randperm(gs.count, generator=torch.Generator().manual_seed(seed))
    out = render(gs, cam)
    shuffled = render(gs.select(perm), cam)
    torch.testing.assert_close(shuffled.image, out.image, atol=1e-12, rtol=0)
    torch.testing.assert_close(shuffled.alpha, out.alpha, atol=1e-12, rtol=0)


def test_transmittance_never_increases_along_depth_order():
    cam = _camera(32)
    gs = _random_scene(3, n=8)
    # the camera looks along +y, so depth order is y order
    front_to_back = gs.select(torch.argsort(gs.positions[:, 1]))
    previous = torch.ones(32, 32, dtype=torch.float64)
    for k in range(1, gs.count + 1):
        transmittance = 1.0 - render(front_to_back.select(torch.arange(k)), cam).alpha
        assert bool((transmittance <= previous + 1e-12).all()), k
        previous = transmittance
    assert float(previous.min()) < 1.0


def test_saliency_is_permutation_equivariant():
    cam = _camera(32)
    gs = _random_scene(5, n=6)
    target = torch.rand(32, 32, 3, generator=torch.Generator().manual_seed(5), dtype=torch.float64)
    perm = torch.tensor([3, 0, 5, 1, 4, 2])
    scores = primitive_saliency(gs, [cam], [target])
    shuffled = primitive_saliency(gs.select(perm), [cam], [target])
    torch.testing.assert_close(shuffled, scores[perm], atol=1e-10, rtol=1e-8)


def test_saliency_ranking_matches_finite_difference_oracle():
    cam = _camera(32)
    gs = replace(
        _gaussians([(0.0, 0.0, 0.0), (0.25, 0.3, 0.15), (-0.3, -0.4, -0.2)],
                   [(0.9, 0.2, 0.1), (0.1, 0.8, 0.3), (0.4, 0.4, 0.9)]),
        opacity_logits=torch.logit(torch.tensor([[0.9], [0.5], [0.15]], dtype=torch.float64)),
        log_scales=torch.tensor([[-1.5] * 3, [-2.0] * 3, [-2.5] * 3], dtype=torch.float64),
    )
    target = torch.rand(32, 32, 3, generator=torch.Generator().manual_seed(8), dtype=torch.float64)
    scores = primitive_saliency(gs, [cam], [target], settings=EXACT)

    def loss_of(moved: GaussianSet) -> float:
        return float(rendering_loss(render(moved, cam, settings=EXACT).image, target))

    eps = 1e-6
    oracle = []
    for i in range(gs.count):
        squared = 0.0
        for name in GaussianSet.ATTRIBUTES:
            base = getattr(gs, name)
            for j in range(base[i].numel()):
                plus, minus = base.clone(), base.clone()
                plus.reshape(gs.count, -1)[i, j] += eps
                minus.reshape(gs.count, -1)[i, j] -= eps
                delta = loss_of(replace(gs, **{name: plus})) - loss_of(replace(gs, **{name: minus}))
                squared += (delta / (2 * eps)) ** 2
        oracle.append(squared ** 0.5)
    oracle = torch.tensor(oracle, dtype=torch.float64)
    torch.testing.assert_close(scores, oracle, atol=1e-5, rtol=1e-2)
    assert torch.argsort(scores).tolist() == torch.argsort(oracle).tolist()
