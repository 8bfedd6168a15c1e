"""Diffusion noise schedule, forward noising and noise-encoded conditioning.

Timesteps are 1-based (t = 1..T) in every public function; the tables are
stored 0-based, so ``betas[t - 1]`` is beta_t. ``alpha_bar(0)`` is 1 by the
empty-product convention.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, RangeError, ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sampling_steps: np.ndarray  # descending, first entry T, last entry 1 (when T_s > 1)

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        self._check(t)
        return float(self.alpha_bars[t - 1])

    def alpha(self, t: int) -> float:
        if t == 0:
            return 1.0
        self._check(t)
        return float(self.alphas[t - 1])

    def _check(self, t):
        if not 1 <= t <= self.T:
            raise RangeError(f"timestep {t} outside 1..{self.T}")


@dataclass
class ConditioningConfig:
    delta_max: int = 10
    inference_delta: int = 0

    def validate(self, T: int | None = None):
        if self.inference_delta < 0:
            raise ConfigError("condition.inference_delta must be >= 0")
        if self.delta_max < 1:
            raise ConfigError("condition.delta_max must be >= 1")
        if self.inference_delta > self.delta_max:
            raise ConfigError(
                f"condition.inference_delta ({self.inference_delta}) exceeds condition.delta_max ({self.delta_max})")
        if T is not None and self.delta_max > T:
            raise ConfigError(f"condition.delta_max ({self.delta_max}) exceeds diffusion.T ({T})")


def build_schedule(T: int = 1000, beta_start: float = 0.00085, beta_end: float = 0.012,
                   T_s: int = 50) -> NoiseSchedule:
    """Scaled-linear schedule: linear in sqrt(beta) between the two endpoints."""
    if T < 1:
        raise ConfigError("diffusion.T must be >= 1")
    if not 0.0 < beta_start < 1.0 or not 0.0 < beta_end < 1.0:
        raise ConfigError("betas must lie in (0, 1)")
    if T > 1 and not beta_start < beta_end:
        raise ConfigError("diffusion.beta_start must be < diffusion.beta_end")
    if not 1 <= T_s <= T:
        raise ConfigError(f"diffusion.sampling_steps must be in 1..{T}, got {T_s}")
    if T == 1:
        betas = np.array([beta_start])
    else:
        betas = np.linspace(np.sqrt(beta_start), np.sqrt(beta_end), T) ** 2
        # pin the endpoints against rounding in sqrt/square
        betas[0], betas[-1] = beta_start, beta_end
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    steps = np.unique(np.round(np.linspace(T, 1, T_s)).astype(int))[::-1]
    if len(steps) != T_s:
        raise ConfigError(f"cannot place {T_s} distinct sampling steps in 1..{T}")
    return NoiseSchedule(T, betas, alphas, alpha_bars, steps)


def forward_noise(z0, t: int, eps, sched: NoiseSchedule):
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps. Works for numpy and torch."""
    sched._check(t)
    ab = sched.alpha_bar(t)
    if z0.shape != eps.shape:
        raise ShapeError(f"noise shape {tuple(eps.shape)} != data shape {tuple(z0.shape)}")
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


def forward_noise_batch(z0, t, eps, sched: NoiseSchedule):
    """Per-sample timesteps; ``t`` is an integer tensor/array of shape (B,)."""
    import torch

    ab = torch.as_tensor(sched.alpha_bars, dtype=z0.dtype)[torch.as_tensor(t) - 1]
    ab = ab.view(-1, *([1] * (z0.dim() - 1)))
    return ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps


def encode_condition(z_cond, delta: int, eps, sched: NoiseSchedule,
                     cfg: ConditioningConfig | None = None, training: bool = False):
    """Noise-encode the image condition at timestep ``delta``; delta = 0 is the identity."""
    if delta < 0:
        raise RangeError(f"delta must be >= 0, got {delta}")
    if training and cfg is not None and delta > cfg.delta_max:
        raise ConfigError(f"delta {delta} exceeds condition.delta_max {cfg.delta_max}")
    if delta == 0:
        return z_cond
    return forward_noise(z_cond, delta, eps, sched)


def encode_condition_batch(z_cond, delta, eps, sched: NoiseSchedule):
    """Batched form with per-sample ``delta`` (B,); entries equal to 0 pass through."""
    import torch

    delta = torch.as_tensor(delta)
    ab = torch.ones(delta.shape, dtype=z_cond.dtype)
    nz = delta > 0
    ab[nz] = torch.as_tensor(sched.alpha_bars, dtype=z_cond.dtype)[delta[nz] - 1]
    ab = ab.view(-1, *([1] * (z_cond.dim() - 1)))
    return ab.sqrt() * z_cond + (1.0 - ab).sqrt() * eps


def draw_delta(gen, size: int, delta_max: int):
    """Training-time delta ~ U{1..delta_max} as a torch long tensor, drawn from ``gen``."""
    import torch

    return torch.randint(1, delta_max + 1, (size,), generator=gen)


def sample_delta(rng: np.random.Generator, cfg: ConditioningConfig, size=None, noise_encoding: bool = True):
    """delta ~ U{1..delta_max}; all zeros when noise encoding is off."""
    if not noise_encoding:
        return np.zeros(size, dtype=int) if size is not None else 0
    return rng.integers(1, cfg.delta_max + 1, size=size)

