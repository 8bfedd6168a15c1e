"""DiT noise estimator over the 8-channel stack [z_t, z_cond] in sub-band space."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError


@dataclass
class DenoiserConfig:
    depth: int = 12
    hidden_dim: int = 384
    num_heads: int = 6
    patch_size: int = 5
    in_channels: int = 8
    out_channels: int = 4
    timestep_embed_dim: int = 256
    mlp_ratio: float = 4.0

    def validate(self, grid: tuple[int, int] | None = None):
        if self.depth < 1:
            raise ConfigError("denoiser.depth must be >= 1")
        if self.hidden_dim % self.num_heads:
            raise ConfigError(
                f"denoiser.hidden_dim ({self.hidden_dim}) not divisible by denoiser.num_heads ({self.num_heads})")
        if self.hidden_dim % 4:
            raise ConfigError("denoiser.hidden_dim must be a multiple of 4 (2-D sincos positions)")
        if self.out_channels != 4 or self.in_channels != 2 * self.out_channels:
            raise ConfigError("denoiser predicts 4 sub-band channels from 8 input channels")
        if self.timestep_embed_dim % 2:
            raise ConfigError("denoiser.timestep_embed_dim must be even")
        if grid is not None and (grid[0] % self.patch_size or grid[1] % self.patch_size):
            raise ConfigError(f"sub-band grid {grid} not divisible by denoiser.patch_size ({self.patch_size})")


def modulate(x, shift, scale):
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def sincos_2d(dim: int, gh: int, gw: int) -> torch.Tensor:
    """Fixed (gh*gw, dim) positional table; first half encodes rows, second half columns."""

    def one_axis(d, pos):
        omega = 1.0 / 10000 ** (torch.arange(d // 2, dtype=torch.float64) / (d / 2.0))
        out = pos[:, None].to(torch.float64) * omega[None]
        return torch.cat([torch.sin(out), torch.cos(out)], dim=1)

    rows = one_axis(dim // 2, torch.arange(gh).repeat_interleave(gw))
    cols = one_axis(dim // 2, torch.arange(gw).repeat(gh))
    return torch.cat([rows, cols], dim=1)


class TimestepEmbedder(nn.Module):
    def __init__(self, hidden, freq_dim):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, hidden), nn.SiLU(), nn.Linear(hidden, hidden))

    def forward(self, t):
        return self.mlp(timestep_embedding(t, self.freq_dim).to(self.mlp[0].weight.dtype))


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        q, k, v = self.qkv(x).view(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class DiTBlock(nn.Module):
    """Pre-norm transformer block with adaLN-Zero modulation from the timestep embedding."""

    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(approximate="tanh"), nn.Linear(hidden, dim))
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(dim, 6 * dim))

    def forward(self, x, c):
        sh_a, sc_a, g_a, sh_m, sc_m, g_m = self.adaLN_modulation(c).chunk(6, dim=1)
        x = x + g_a.unsqueeze(1) * self.attn(modulate(self.norm1(x), sh_a, sc_a))
        return x + g_m.unsqueeze(1) * self.mlp(modulate(self.norm2(x), sh_m, sc_m))


class FinalLayer(nn.Module):
    def __init__(self, dim, patch, out_ch):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.linear = nn.Linear(dim, patch * patch * out_ch)
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(dim, 2 * dim))

    def forward(self, x, c):
        shift, scale = self.adaLN_modulation(c).chunk(2, dim=1)
        return self.linear(modulate(self.norm(x), shift, scale))


class WaveletDiT(nn.Module):
    """eps_theta(z_t, t, z_cond): both stacks are (B, 4, h, w); t is (B,) or a scalar."""

    def __init__(self, cfg: DenoiserConfig, seed: int = 0):
        super().__init__()
        cfg.validate()
        self.config = cfg
        self.seed = seed
        d, p = cfg.hidden_dim, cfg.patch_size
        self.patch_embed = nn.Linear(p * p * cfg.in_channels, d)
        self.t_embedder = TimestepEmbedder(d, cfg.timestep_embed_dim)
        self.blocks = nn.ModuleList(DiTBlock(d, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.final_layer = FinalLayer(d, p, cfg.out_channels)
        self._pos_cache: dict = {}
        self.reset_parameters(seed)

    @torch.no_grad()
    def reset_parameters(self, seed: int):
        gen = torch.Generator().manual_seed(seed)
        for mod in self.modules():
            if isinstance(mod, nn.Linear):
                nn.init.trunc_normal_(mod.weight, std=0.02, a=-0.04, b=0.04, generator=gen)
                nn.init.zeros_(mod.bias)
        # adaLN-Zero: identity modulation, closed gates, zero output head
        for blk in self.blocks:
            nn.init.zeros_(blk.adaLN_modulation[-1].weight)
            nn.init.zeros_(blk.adaLN_modulation[-1].bias)
        nn.init.zeros_(self.final_layer.adaLN_modulation[-1].weight)
        nn.init.zeros_(self.final_layer.adaLN_modulation[-1].bias)
        nn.init.zeros_(self.final_layer.linear.weight)
        nn.init.zeros_(self.final_layer.linear.bias)

    def pos_embed(self, gh, gw, dtype):
        key = (gh, gw, dtype)
        if key not in self._pos_cache:
            self._pos_cache[key] = sincos_2d(self.config.hidden_dim, gh, gw).to(dtype)
        return self._pos_cache[key]

    def num_tokens(self, h, w) -> int:
        return (h // self.config.patch_size) * (w // self.config.patch_size)

    def forward(self, z_t, t, z_cond):
        if z_t.shape != z_cond.shape:
            raise ShapeError(f"noisy stack {tuple(z_t.shape)} and condition {tuple(z_cond.shape)} differ")
        if z_t.dim() != 4 or z_t.shape[1] != self.config.out_channels:
            raise ShapeError(f"expected (B, 4, h, w) stacks, got {tuple(z_t.shape)}")
        b, _, h, w = z_t.shape
        p = self.config.patch_size
        if h % p or w % p:
            raise ShapeError(f"sub-band grid {h}x{w} not divisible by patch size {p}")
        gh, gw = h // p, w // p
        x = torch.cat([z_t, z_cond], dim=1)
        x = x.view(b, -1, gh, p, gw, p).permute(0, 2, 4, 3, 5, 1).reshape(b, gh * gw, -1)
        x = self.patch_embed(x) + self.pos_embed(gh, gw, x.dtype)
        t = torch.as_tensor(t)
        if t.dim() == 0:
            t = t.expand(b)
        c = self.t_embedder(t)
        for blk in self.blocks:
            x = blk(x, c)
        x = self.final_layer(x, c)
        oc = self.config.out_channels
        return x.view(b, gh, gw, p, p, oc).permute(0, 5, 1, 3, 2, 4).reshape(b, oc, h, w)


def init_params(cfg: DenoiserConfig, seed: int = 0) -> WaveletDiT:
    return WaveletDiT(cfg, seed)


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def config_dict(cfg: DenoiserConfig) -> dict:
    return asdict(cfg)
