import json
import math

import pytest
import torch

from restoration.dataset import DatasetManifest, condition_for
from restoration.diffusion import NetConfig, RestorerState, build_denoiser
from restoration.distill import (DistillConfig, StepReport, dmd_gradient, perceptual, phi_minus_step,
                                 phi_plus_step, train)
from splatrestore.diffeng import AdamWState
from splatrestore.errors import InputError, NumericalError, ShapeError
from splatrestore.image_io import write_f32img

SMALL = NetConfig(channels=8, rank=2, vocab_size=16)


def _state(seed: int = 1) -> RestorerState:
    return RestorerState(build_denoiser(SMALL, seed=seed))


def _batch(seed: int = 0, size: int = 2):
    gen = torch.Generator().manual_seed(seed)
    clean = torch.rand(size, 3, 16, 16, generator=gen)
    degraded = (clean + 0.05 * torch.randn(clean.shape, generator=gen)).clamp(0, 1)
    return degraded, clean, torch.arange(size)


def _manifest(root, scenes: int = 3, corrupt: bool = False) -> DatasetManifest:
    gen = torch.Generator().manual_seed(11)
    manifest = DatasetManifest(root=root, seed=0, vocab_size=16, levels=[0])
    for scene in range(scenes):
        for view in range(2):
            clean = torch.rand(16, 16, 3, generator=gen)
            degraded = torch.full_like(clean, math.nan) if corrupt else (clean * 0.9).clamp(0, 1)
            clean_name = f"scene_{scene}/view_{view}.clean.f32img"
            degraded_name = f"scene_{scene}/view_{view}.degraded.f32img"
            write_f32img(clean, root / clean_name)
            write_f32img(degraded, root / degraded_name)
            manifest.pairs.append({"scene": scene, "view": view, "level": 0,
                                   "condition": condition_for(scene), "clean": clean_name,
                                   "degraded": degraded_name})
    return manifest


def _snapshot(params):
    return {name: p.detach().clone() for name, p in params.items()}


def _unchanged(before, params) -> bool:
    return all(torch.equal(before[name], p.detach()) for name, p in params.items())


def test_perceptual_is_zero_for_identical_and_symmetric():
    gen = torch.Generator().manual_seed(0)
    x = torch.rand(2, 3, 16, 16, generator=gen)
    y = torch.rand(2, 3, 16, 16, generator=gen)
    assert float(perceptual(x, x)) == 0.0
    assert float(perceptual(x, y)) > 0.0
    assert torch.equal(perceptual(x, y, reduction="none"), perceptual(y, x, reduction="none"))
    assert perceptual(x, y, reduction="none").shape == (2,)
    with pytest.raises(ShapeError):
        perceptual(x, y[:1])
    with pytest.raises(InputError):
        perceptual(x, y, reduction="sum")


def test_alpha_one_signal_vanishes_when_critic_matches_base():
    state = _state()
    degraded, clean, conditions = _batch()
    t = torch.tensor([100, 800])
    eps_t = torch.randn(clean.shape)
    signal = dmd_gradient(state, degraded, clean, t, eps_t, alpha=1.0, cfg_scale=7.5, condition=conditions)
    assert float(signal.abs().max()) == 0.0


def test_alpha_zero_signal_vanishes_at_ground_truth():
    state = _state()
    _, clean, conditions = _batch()
    t = torch.tensor([300, 600])
    eps_t = torch.randn(clean.shape)
    signal = dmd_gradient(state, clean, clean, t, eps_t, alpha=0.0, cfg_scale=7.5, condition=conditions)
    assert float(signal.abs().max()) == 0.0


def test_signal_is_normalized_per_sample():
    state = _state()
    with torch.no_grad():
        for p in state.adapter_parameters("phi_plus").values():
            p.add_(0.05)
    degraded, clean, conditions = _batch()
    signal = dmd_gradient(state, degraded, clean, torch.tensor([200, 400]), torch.randn(clean.shape),
                          alpha=0.7, cfg_scale=7.5, condition=conditions)
    means = signal.abs().mean(dim=(1, 2, 3))
    assert bool((means <= 1.0).all())
    assert float(means.max()) > 0.5


def test_zero_signal_and_loss_weights_leave_restorer_fixed():
    state = _state()
    cfg = DistillConfig(alpha=1.0, lambda_l2=0.0, lambda_perc=0.0, weight_decay=0.0, cond_dropout=0.0)
    params = state.adapter_parameters("phi_minus")
    before = _snapshot(params)
    report = phi_minus_step(state, _batch(), cfg, AdamWState(), torch.Generator().manual_seed(0))
    assert report.loss_kl == 0.0
    assert report.grad_norm_minus == 0.0
    assert _unchanged(before, params)


def test_restorer_step_touches_only_the_restorer_adapter():
    state = _state()
    cfg = DistillConfig()
    base = state.base_state()
    critic = _snapshot(state.adapter_parameters("phi_plus"))
    restorer = _snapshot(state.adapter_parameters("phi_minus"))
    report = phi_minus_step(state, _batch(), cfg, AdamWState(), torch.Generator().manual_seed(0), step=1)
    assert report.is_finite() and report.l2 > 0.0
    assert _unchanged(critic, state.adapter_parameters("phi_plus"))
    assert all(torch.equal(base[n], p) for n, p in state.net.base_parameters().items())
    assert not _unchanged(restorer, state.adapter_parameters("phi_minus"))


def test_critic_step_touches_only_the_critic_adapter():
    state = _state()
    cfg = DistillConfig()
    base = state.base_state()
    critic = _snapshot(state.adapter_parameters("phi_plus"))
    restorer = _snapshot(state.adapter_parameters("phi_minus"))
    report = phi_plus_step(state, _batch(), cfg, AdamWState(), torch.Generator().manual_seed(0), step=1)
    assert report.loss_plus > 0.0 and report.grad_norm_plus > 0.0
    assert report.loss_kl is None
    assert _unchanged(restorer, state.adapter_parameters("phi_minus"))
    assert all(torch.equal(base[n], p) for n, p in state.net.base_parameters().items())
    assert not _unchanged(critic, state.adapter_parameters("phi_plus"))


def test_train_with_zero_steps_returns_state_unchanged(tmp_path):
    state = _state()
    before = _snapshot(state.adapter_parameters("phi_minus"))
    same, reports = train(_manifest(tmp_path), state, DistillConfig(steps=0), tmp_path / "run")
    assert same is state and reports == []
    assert _unchanged(before, state.adapter_parameters("phi_minus"))
    assert not (tmp_path / "run").exists()


def test_training_is_deterministic_and_logs(tmp_path):
    manifest = _manifest(tmp_path)
    cfg = DistillConfig(steps=2, batch_size=5, checkpoint_every=1, log_every=1)
    _, first = train(manifest, _state(), cfg, tmp_path / "a")
    _, second = train(manifest, _state(), cfg)
    assert [r.to_dict() for r in first] == [r.to_dict() for r in second]
    lines = (tmp_path / "a" / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 2
    assert json.loads(lines[1])["step"] == 2
    assert (tmp_path / "a" / "restorer_step1.ckpt").exists()
    assert (tmp_path / "a" / "restorer_step2.ckpt").exists()
    assert all(r.is_finite() for r in first)


def test_training_failure_writes_last_report(tmp_path):
    manifest = _manifest(tmp_path, scenes=2, corrupt=True)
    with pytest.raises(NumericalError):
        train(manifest, _state(), DistillConfig(steps=1, batch_size=2), tmp_path / "run")
    assert (tmp_path / "run" / "last_report.json").exists()


def test_config_validation_and_learning_rates():
    cfg = DistillConfig(lr_scale=1.0)
    assert cfg.lr_minus == pytest.approx(5e-6)
    assert cfg.lr_plus == pytest.approx(1e-6)
    with pytest.raises(InputError):
        DistillConfig(alpha=1.5)
    with pytest.raises(InputError):
        DistillConfig(batch_size=0)


def test_step_report_merge_and_finiteness():
    merged = StepReport(step=3, loss_kl=0.1, l2=0.2).merged(StepReport(step=3, loss_plus=0.4))
    assert merged.to_dict() == {"step": 3, "loss_kl": 0.1, "l2": 0.2, "perceptual": None, "loss_plus": 0.4,
                                "grad_norm_minus": None, "grad_norm_plus": None}
    assert merged.is_finite()
    assert not StepReport(step=1, l2=math.inf).is_finite()


def test_base_weights_are_bit_identical_after_training(tmp_path):
    state = _state()
    base = state.base_state()
    train(_manifest(tmp_path), state, DistillConfig(steps=100, batch_size=3, log_every=25))
    assert all(torch.equal(base[n], p) for n, p in state.net.base_parameters().items())


@pytest.mark.parametrize("t0", [0, 1000])
def test_training_rejects_t0_outside_the_schedule(tmp_path, t0):
    with pytest.raises(InputError):
        train(_manifest(tmp_path), _state(), DistillConfig(steps=1, t0=t0), tmp_path / "run")
    assert not (tmp_path / "run").exists()
