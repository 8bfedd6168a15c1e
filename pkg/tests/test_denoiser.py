import numpy as np
import pytest
import torch

from wdtmd.denoiser import DenoiserConfig, count_params, init_params, sincos_2d
from wdtmd.errors import ConfigError, ShapeError

TINY = DenoiserConfig(depth=1, hidden_dim=16, num_heads=2, patch_size=2, timestep_embed_dim=8)


def closed_form_count(cfg: DenoiserConfig) -> int:
    d, p, f = cfg.hidden_dim, cfg.patch_size, cfg.timestep_embed_dim
    m = int(d * cfg.mlp_ratio)
    embed = (p * p * cfg.in_channels + 1) * d
    temb = (f + 1) * d + (d + 1) * d
    block = (d + 1) * 3 * d + (d + 1) * d + (d + 1) * m + (m + 1) * d + (d + 1) * 6 * d
    head = (d + 1) * 2 * d + (d + 1) * p * p * cfg.out_channels
    return embed + temb + cfg.depth * block + head


def randomize(model, seed=0):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(0.3 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return model


def stacks(b=2, h=4, w=6, seed=0, dtype=torch.float64):
    gen = torch.Generator().manual_seed(seed)
    return (torch.randn(b, 4, h, w, generator=gen, dtype=dtype),
            torch.randn(b, 4, h, w, generator=gen, dtype=dtype))


@pytest.mark.parametrize("cfg", [DenoiserConfig(), TINY, DenoiserConfig(depth=4, hidden_dim=128, num_heads=4, patch_size=4,
                                                                          timestep_embed_dim=128)])
def test_parameter_count_closed_form(cfg):
    assert count_params(init_params(cfg)) == closed_form_count(cfg)


def test_default_size_near_reported_scale():
    n = count_params(init_params(DenoiserConfig()))
    assert 20e6 < n < 40e6


def test_same_seed_bit_identical():
    a, b = init_params(TINY, seed=3), init_params(TINY, seed=3)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)
    c = init_params(TINY, seed=4)
    assert not torch.equal(a.patch_embed.weight, c.patch_embed.weight)


def test_fresh_model_predicts_zero():
    model = init_params(TINY).double()
    z, c = stacks()
    out = model(z, torch.tensor([1, 700]), c)
    assert out.shape == z.shape
    assert torch.count_nonzero(out) == 0


def test_init_std_and_truncation():
    w = init_params(DenoiserConfig(depth=2, hidden_dim=64, num_heads=4, patch_size=2)).blocks[0].mlp[0].weight
    assert abs(w.std().item() - 0.02) < 0.003
    assert w.abs().max().item() <= 0.04


def test_shape_preserved_and_token_count():
    cfg = DenoiserConfig(depth=1, hidden_dim=16, num_heads=2, patch_size=5, timestep_embed_dim=8)
    model = randomize(init_params(cfg).double())
    z, c = stacks(h=10, w=15)
    assert model(z, 5, c).shape == z.shape
    assert model.num_tokens(10, 15) == (10 * 15) // 25


def test_finite_difference_gradients():
    model = randomize(init_params(TINY).double(), seed=1)
    z, c = stacks(seed=2)
    t = torch.tensor([3, 400])
    target = torch.randn_like(z)

    def loss():
        return ((model(z, t, c) - target) ** 2).mean()

    model.zero_grad()
    loss().backward()
    params = [p for p in model.parameters()]
    rng = np.random.default_rng(0)
    h = 1e-3
    checked = 0
    while checked < 20:
        p = params[rng.integers(len(params))]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        analytic = p.grad[idx].item()
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + h
            up = loss().item()
            p[idx] = orig - h
            down = loss().item()
            p[idx] = orig
        numeric = (up - down) / (2 * h)
        if abs(numeric) < 1e-7 and abs(analytic) < 1e-7:
            continue
        assert abs(analytic - numeric) <= 1e-2 * max(abs(numeric), abs(analytic))
        checked += 1


def test_timestep_sensitivity_after_one_step():
    torch.manual_seed(0)
    model = init_params(TINY).double()
    z, c = stacks(seed=5)
    opt = torch.optim.SGD(model.parameters(), lr=0.5)
    loss = ((model(z, torch.tensor([10, 900]), c) - torch.randn_like(z)) ** 2).mean()
    loss.backward()
    opt.step()
    # one step opens the head; the gates are still closed, so do a second to reach the blocks
    opt.zero_grad()
    ((model(z, torch.tensor([10, 900]), c) - torch.randn_like(z)) ** 2).mean().backward()
    opt.step()
    with torch.no_grad():
        a = model(z[:1], 1, c[:1])
        b = model(z[:1], 1000, c[:1])
    assert (a - b).abs().max() > 0


def test_condition_sensitivity():
    model = randomize(init_params(TINY).double(), seed=7)
    z, c = stacks(seed=8)
    with torch.no_grad():
        a = model(z, 50, c)
        b = model(z, 50, c + 0.1)
    assert (a - b).abs().max() > 0


def test_positional_table():
    pe = sincos_2d(16, 3, 5)
    assert pe.shape == (15, 16)
    # tokens in the same row share the row half
    torch.testing.assert_close(pe[0, :8], pe[4, :8])
    assert not torch.equal(pe[0, 8:], pe[4, 8:])


def test_shape_errors():
    model = init_params(TINY).double()
    z, c = stacks()
    with pytest.raises(ShapeError):
        model(z, 1, c[:, :, :2])
    with pytest.raises(ShapeError):
        model(z[:, :3], 1, c[:, :3])
    with pytest.raises(ShapeError):
        model(*stacks(h=3, w=4)[:1], 1, stacks(h=3, w=4)[1])


@pytest.mark.parametrize("kwargs", [dict(hidden_dim=30, num_heads=4), dict(depth=0), dict(out_channels=3),
                                    dict(timestep_embed_dim=7)])
def test_config_errors(kwargs):
    with pytest.raises(ConfigError):
        DenoiserConfig(**kwargs).validate()


def test_grid_must_tile():
    with pytest.raises(ConfigError, match="patch_size"):
        DenoiserConfig(patch_size=5).validate(grid=(48, 32))
    DenoiserConfig(patch_size=5).validate(grid=(150, 100))
