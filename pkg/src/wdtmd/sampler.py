"""Few-step reverse sampler and pseudo-normal reconstruction.

One update from timestep t to the next sub-schedule entry t' (t' = 0 after
the last entry):

    z0_hat = (z_t - sqrt(1 - abar_t) * eps_theta) / sqrt(abar_t)
    d      = c_out(t) * z0_hat + c_skip(t) * z_t
    z_t'   = sqrt(abar_t') * d + gamma * noise      (intermediate steps)
    z_0    = d                                      (last step)

with gamma = (1 - abar_t') / sqrt(1 - abar_t') = sqrt(1 - abar_t').

The boundary scalings take an argument x that vanishes at the boundary:

    "lcm": x = timestep_scaling * t,  c_skip = s^2 / (x^2 + s^2),  c_out = x / sqrt(x^2 + s^2)
    "snr": x = sqrt(1 - abar_t) / sqrt(abar_t),  c_out = s * x / sqrt(x^2 + s^2)

"lcm" is the default; "snr" shrinks d towards zero by up to a factor s at
high noise and is kept for comparison only.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, DivergenceError, RangeError, ShapeError
from .image import HsvImage
from .schedule import NoiseSchedule, encode_condition
from .wavelet import SubbandNorm, dwt2, idwt2


PARAMETERIZATIONS = ("lcm", "snr")


@dataclass
class SamplerConfig:
    sigma_data: float = 0.5
    seed: int = 0
    parameterization: str = "lcm"
    timestep_scaling: float = 10.0

    def validate(self):
        if self.parameterization not in PARAMETERIZATIONS:
            raise ConfigError(f"sampler.parameterization must be one of {PARAMETERIZATIONS}")
        if not self.sigma_data > 0 or not self.timestep_scaling > 0:
            raise ConfigError("sampler.sigma_data and sampler.timestep_scaling must be > 0")


def boundary_scalings(x: float, sigma_data: float = 0.5, parameterization: str = "lcm") -> tuple[float, float]:
    """(c_skip, c_out) at boundary argument ``x``; x = 0 gives exactly (1, 0)."""
    s2 = sigma_data * sigma_data
    c_skip = s2 / (x * x + s2)
    if parameterization == "snr":
        return c_skip, sigma_data * x / math.sqrt(x * x + s2)
    return c_skip, x / math.sqrt(x * x + s2)


def boundary_argument(t: int, sched: NoiseSchedule, cfg: SamplerConfig) -> float:
    if t == 0:
        return 0.0
    if cfg.parameterization == "snr":
        ab = sched.alpha_bar(t)
        return math.sqrt(1.0 - ab) / math.sqrt(ab)
    return cfg.timestep_scaling * t


def sub_schedule(sched: NoiseSchedule, T_s: int | None = None) -> np.ndarray:
    if T_s is None or T_s == len(sched.sampling_steps):
        return sched.sampling_steps
    if not 1 <= T_s <= sched.T:
        raise RangeError(f"T_s must lie in 1..{sched.T}, got {T_s}")
    return np.unique(np.round(np.linspace(sched.T, 1, T_s)).astype(int))[::-1]


def sampler_coeffs(t: int, sched: NoiseSchedule, cfg: SamplerConfig | None = None,
                   steps: np.ndarray | None = None) -> tuple[float, float, float]:
    """(c_skip, c_out, gamma) for sub-schedule timestep ``t``."""
    cfg = cfg or SamplerConfig()
    steps = sched.sampling_steps if steps is None else steps
    pos = np.nonzero(steps == t)[0]
    if len(pos) == 0:
        raise RangeError(f"timestep {t} is not on the sampling sub-schedule")
    k = int(pos[0])
    t_prev = int(steps[k + 1]) if k + 1 < len(steps) else 0
    c_skip, c_out = boundary_scalings(boundary_argument(t, sched, cfg), cfg.sigma_data, cfg.parameterization)
    ab_prev = sched.alpha_bar(t_prev)
    gamma = (1.0 - ab_prev) / math.sqrt(1.0 - ab_prev) if ab_prev < 1.0 else 0.0
    return c_skip, c_out, gamma


@torch.no_grad()
def reverse_sample(model, z_cond: torch.Tensor, sched: NoiseSchedule, gens, T_s: int | None = None,
                   cfg: SamplerConfig | None = None, inference_delta: int = 0, trace: list | None = None) -> torch.Tensor:
    """Run the reverse chain from Gaussian noise; returns the final z_0 estimate.

    ``gens`` is a torch.Generator or one generator per batch element, so each
    image's trajectory does not depend on what it was batched with.
    """
    if z_cond.dim() != 4 or z_cond.shape[1] != 4:
        raise ShapeError(f"condition must be (B, 4, h, w), got {tuple(z_cond.shape)}")
    if isinstance(gens, torch.Generator):
        gens = [gens] * z_cond.shape[0]
        single = True
    else:
        single = False
        if len(gens) != z_cond.shape[0]:
            raise ShapeError("need one generator per batch element")

    def noise():
        if single:
            return torch.randn(z_cond.shape, generator=gens[0], dtype=z_cond.dtype)
        return torch.stack([torch.randn(z_cond.shape[1:], generator=g, dtype=z_cond.dtype) for g in gens])

    cfg = cfg or SamplerConfig()
    steps = sub_schedule(sched, T_s)
    z = noise()
    cond = z_cond
    if inference_delta > 0:
        cond = encode_condition(z_cond, inference_delta, noise(), sched)
    for k, t in enumerate(steps):
        t = int(t)
        eps = model(z, torch.full((z.shape[0],), t, dtype=torch.long), cond)
        ab = sched.alpha_bar(t)
        z0_hat = (z - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
        c_skip, c_out, gamma = sampler_coeffs(t, sched, cfg, steps)
        denoised = c_out * z0_hat + c_skip * z
        if k + 1 < len(steps):
            ab_prev = sched.alpha_bar(int(steps[k + 1]))
            z = math.sqrt(ab_prev) * denoised + gamma * noise()
        else:
            z = denoised
        if not torch.isfinite(z).all():
            raise DivergenceError(f"non-finite sample at step {k} (t={t})")
        if trace is not None:
            trace.append({"t": t, "z0_hat": z0_hat.clone(), "z": z.clone()})
    return z


def image_generator(seed: int, source_id: str) -> torch.Generator:
    return torch.Generator().manual_seed((seed * 1_000_003 + zlib.crc32(source_id.encode())) % (2 ** 63))


def reconstruct_batch(model, images: list[HsvImage], sched: NoiseSchedule, basis: str,
                      cfg: SamplerConfig | None = None, inference_delta: int = 0,
                      T_s: int | None = None, batch_size: int = 8,
                      norm: SubbandNorm | None = None) -> list[HsvImage]:
    """Pseudo-normal reconstructions I_0: sample in sub-band space, invert, merge H and S."""
    cfg = cfg or SamplerConfig()
    norm = norm or SubbandNorm()
    dtype = next(model.parameters()).dtype
    out = []
    was_training = model.training
    model.eval()
    try:
        for i in range(0, len(images), batch_size):
            chunk = images[i:i + batch_size]
            zc = torch.as_tensor(norm.apply(np.stack([dwt2(im.value, basis) for im in chunk])), dtype=dtype)
            gens = [image_generator(cfg.seed, im.source_id) for im in chunk]
            z0 = reverse_sample(model, zc, sched, gens, T_s, cfg, inference_delta)
            v0 = np.clip(idwt2(norm.invert(z0.double().numpy()), basis), 0.0, 1.0)
            out.extend(im.with_value(v) for im, v in zip(chunk, v0))
    finally:
        model.train(was_training)
    return out


def reconstruct_image(model, sample, sched: NoiseSchedule, basis: str, cfg: SamplerConfig | None = None,
                      inference_delta: int = 0, norm: SubbandNorm | None = None) -> HsvImage:
    return reconstruct_batch(model, [sample.image], sched, basis, cfg, inference_delta, norm=norm)[0]
