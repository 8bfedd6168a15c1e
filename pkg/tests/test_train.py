import json
import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from wdtmd import checkpoint
from wdtmd.denoiser import DenoiserConfig, init_params
from wdtmd.errors import DivergenceError, ValidationError
from wdtmd.image import split_samples, write_png16
from wdtmd.inpaint import InpaintConfig, pseudo_normal_plane
from wdtmd.schedule import build_schedule
from wdtmd.train import (
    attach_pseudo_normals,
    build_training_set,
    cosine_lambda,
    ddpm_loss,
    diffusion_loss,
    fit,
    load_model,
    make_optimizer,
    train_step,
)

from conftest import tiny_config

SMALL = DenoiserConfig(depth=1, hidden_dim=32, num_heads=2, patch_size=4, timestep_embed_dim=16)


@pytest.fixture(scope="module")
def sched():
    return build_schedule()


def _randomized(seed=0):
    model = init_params(SMALL, seed)
    gen = torch.Generator().manual_seed(seed + 100)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.05 * torch.randn(p.shape, generator=gen))
    return model


def test_flags_off_reduce_to_ddpm(sched, tiny_samples):
    train = attach_pseudo_normals(split_samples(tiny_samples, "train"), InpaintConfig())
    data = build_training_set(train, "db2", pixel_supervision=False)
    # without pixel supervision the target is the condition itself
    torch.testing.assert_close(data.z0, data.zc, rtol=0, atol=0)
    model = _randomized()
    z0, zc = data.z0[:4, 0], data.zc[:4, 0]
    a = diffusion_loss(model, z0, zc, sched, torch.Generator().manual_seed(5), 10, noise_encoding=False)
    b = ddpm_loss(model, z0, zc, sched, torch.Generator().manual_seed(5))
    torch.testing.assert_close(a, b, rtol=1e-6, atol=0)


def test_zero_model_loss_is_unit(sched):
    model = init_params(SMALL)
    gen = torch.Generator().manual_seed(0)
    z0 = torch.randn(4, 4, 8, 8, generator=gen)
    losses = [diffusion_loss(model, z0, z0, sched, gen, 10).item() for _ in range(100)]
    se = np.std(losses, ddof=1) / math.sqrt(len(losses))
    assert abs(np.mean(losses) - 1.0) <= 3 * se
    # per-element variance of eps^2 is 2, so the batch mean has variance 2 / n
    assert np.std(losses, ddof=1) == pytest.approx(math.sqrt(2 / z0.numel()), rel=0.3)


def test_training_makes_progress(sched, tiny_samples):
    train = attach_pseudo_normals(split_samples(tiny_samples, "train"), InpaintConfig())
    train = (train * 2)[:16]
    data = build_training_set(train, "db2", normalize=True)
    model = init_params(SMALL, seed=0)
    opt, lr = make_optimizer(model, tiny_config(".").train, 200)
    gen = torch.Generator().manual_seed(0)
    losses = []
    for step in range(200):
        idx = torch.randint(0, len(data), (4,), generator=gen)
        z0, zc = data.batch(idx, torch.zeros(4, dtype=torch.long))
        losses.append(train_step(model, opt, z0, zc, sched, gen, 10, lr_scheduler=lr))
    smooth = np.convolve(losses, np.ones(10) / 10, mode="valid")
    assert smooth[-1] < smooth[0]
    assert all(math.isfinite(x) and x > 0 for x in losses)


class NanModel(nn.Module):
    def __init__(self):
        super().__init__()
        self.w = nn.Parameter(torch.zeros(()))

    def forward(self, z, t, c):
        return z * float("nan") + self.w


def test_divergence_carries_diagnostics(sched):
    model = NanModel()
    opt = torch.optim.SGD(model.parameters(), lr=0.1)
    z = torch.randn(2, 4, 4, 4)
    with pytest.raises(DivergenceError) as info:
        train_step(model, opt, z, z, sched, torch.Generator().manual_seed(0), 10)
    assert math.isnan(info.value.diagnostics["loss"])
    with pytest.raises(ValidationError):
        train_step(model, opt, z[:0], z[:0], sched, torch.Generator(), 10)


def test_rng_order_without_noise_encoding(sched):
    # tau off draws only t and eps, so the generator ends where the DDPM path ends
    z = torch.randn(3, 4, 4, 4)
    model = init_params(SMALL)
    g1, g2 = torch.Generator().manual_seed(2), torch.Generator().manual_seed(2)
    diffusion_loss(model, z, z, sched, g1, 10, noise_encoding=False)
    ddpm_loss(model, z, z, sched, g2)
    assert torch.equal(g1.get_state(), g2.get_state())


def test_cosine_schedule_endpoints():
    fn = cosine_lambda(100)
    assert fn(0) == 1.0
    assert fn(50) == pytest.approx(0.5)
    assert fn(100) == pytest.approx(0.0, abs=1e-15)


def test_attach_pseudo_normals(tmp_path, tiny_samples):
    train = split_samples(tiny_samples, "train")
    abnormal = [s for s in train if s.label]
    normal = [s for s in train if not s.label]
    assert abnormal and normal
    stored = abnormal[0]
    noisy = np.clip(pseudo_normal_plane(stored.image.value, stored.mask) + 0.01, 0, 1)
    write_png16(tmp_path / f"{stored.id}.png", noisy)
    attach_pseudo_normals(train, InpaintConfig(), tmp_path)
    for s in normal:
        np.testing.assert_array_equal(s.vpn, s.image.value)
    for s in abnormal:
        outside = s.mask == 0
        np.testing.assert_array_equal(s.vpn[outside], s.image.value[outside])
    inside = stored.mask > 0
    np.testing.assert_allclose(stored.vpn[inside], noisy[inside], atol=1 / 65535)
    fresh = abnormal[1] if len(abnormal) > 1 else None
    if fresh is not None:
        np.testing.assert_array_equal(fresh.vpn, pseudo_normal_plane(fresh.image.value, fresh.mask))


def test_abnormal_without_target_rejected(tiny_samples):
    train = [s for s in split_samples(tiny_samples, "train") if s.label]
    for s in train:
        s.vpn = None
    with pytest.raises(ValidationError, match="pseudo-normal"):
        build_training_set(train, "db2")


def test_flip_variants(tiny_samples):
    train = attach_pseudo_normals(split_samples(tiny_samples, "train")[:2], InpaintConfig())
    data = build_training_set(train, "db1", flip_augment=True, dtype=torch.float64)
    assert data.z0.shape[1] == 4
    # a vertical flip of the plane flips every Haar band map vertically and negates the height-highpass bands
    flipped = data.zc[0, 2]
    torch.testing.assert_close(flipped[0], data.zc[0, 0, 0].flip(0), rtol=0, atol=1e-12)
    torch.testing.assert_close(flipped[1], -data.zc[0, 0, 1].flip(0), rtol=0, atol=1e-12)


def test_fit_writes_run_artifacts(tmp_path, tiny_corpus, tiny_samples):
    cfg = tiny_config(tiny_corpus, train__epochs=3, train__keep_checkpoints=2)
    train = attach_pseudo_normals(split_samples(tiny_samples, "train"), cfg.inpaint)
    result = fit(cfg, train, split_samples(tiny_samples, "val"), tmp_path)
    assert sorted(p.name for p in tmp_path.glob("ckpt_*.bin")) == ["ckpt_0002.bin", "ckpt_0003.bin"]
    records = [json.loads(x) for x in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert set(records[0]) == {"step", "epoch", "loss", "lr"}
    assert len(records) == 3 * 2  # 8 images, batch 4
    assert [r["epoch"] for r in result.val_history] == [1, 2, 3]
    model, norm, meta = load_model(tmp_path / "best.bin", cfg.denoiser)
    assert meta["epoch"] == result.best_epoch
    assert norm == result.norm
    for k, v in model.state_dict().items():
        assert torch.equal(v, result.model.state_dict()[k])
    tensors, _ = checkpoint.load(tmp_path / "ckpt_0003.bin")
    assert "rng.torch" in tensors and any(k.startswith("optim.") for k in tensors)


def test_select_from_excludes_early_epochs(tmp_path, tiny_corpus, tiny_samples):
    cfg = tiny_config(tiny_corpus, train__epochs=3, train__select_from=3)
    train = attach_pseudo_normals(split_samples(tiny_samples, "train"), cfg.inpaint)
    assert fit(cfg, train, split_samples(tiny_samples, "val")).best_epoch == 3


def test_fit_is_deterministic(tmp_path, tiny_corpus, tiny_samples):
    cfg = tiny_config(tiny_corpus)
    train = attach_pseudo_normals(split_samples(tiny_samples, "train"), cfg.inpaint)
    val = split_samples(tiny_samples, "val")
    fit(cfg, train, val, tmp_path / "a")
    fit(cfg, train, val, tmp_path / "b")
    assert (tmp_path / "a" / "best.bin").read_bytes() == (tmp_path / "b" / "best.bin").read_bytes()
