"""Conditioned diffusion training over pseudo-normal targets.

Per step: t ~ U{1..T}, eps ~ N(0, I), z_t = forward_noise(dwt(V_pn), t, eps);
with noise encoding the condition dwt(V) is itself noised at a random
delta ~ U{1..delta_max}. The loss is the mean squared error between
eps_theta(z_t, t, cond) and eps.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint
from .denoiser import init_params
from .detect import pool_pixels, roc_auc, score_images
from .errors import DivergenceError, UndefinedMetricError, ValidationError
from .image import read_png16
from .inpaint import pseudo_normal_plane
from .sampler import reconstruct_batch
from .schedule import NoiseSchedule, build_schedule, draw_delta, encode_condition_batch, forward_noise_batch
from .wavelet import SubbandNorm, dwt2

log = logging.getLogger(__name__)


@dataclass
class TrainingSet:
    z0: torch.Tensor  # (N, F, 4, h, w): targets, F flip variants
    zc: torch.Tensor  # conditions, same layout
    ids: list
    norm: SubbandNorm = field(default_factory=SubbandNorm)

    def __len__(self):
        return self.z0.shape[0]

    def batch(self, idx: torch.Tensor, flips: torch.Tensor):
        return self.z0[idx, flips], self.zc[idx, flips]


def _variants(plane: np.ndarray, flip: bool) -> list[np.ndarray]:
    if not flip:
        return [plane]
    return [plane, plane[:, ::-1], plane[::-1, :], plane[::-1, ::-1]]


def build_training_set(samples, basis: str, pixel_supervision: bool = True, flip_augment: bool = False,
                       normalize: bool = False, dtype=torch.float32) -> TrainingSet:
    """Wavelet stacks for targets (V_pn, or V with pixel supervision off) and conditions (V).

    With ``normalize`` both are standardized per band using condition statistics.
    """
    if not samples:
        raise ValidationError("training set is empty")
    z0, zc = [], []
    for s in samples:
        v = s.image.value
        if pixel_supervision:
            if s.vpn is None and s.label:
                raise ValidationError(f"{s.id}: abnormal sample has no pseudo-normal target")
            target = v if s.vpn is None else s.vpn
        else:
            target = v
        z0.append(np.stack([dwt2(np.ascontiguousarray(p), basis) for p in _variants(target, flip_augment)]))
        zc.append(np.stack([dwt2(np.ascontiguousarray(p), basis) for p in _variants(v, flip_augment)]))
    z0, zc = np.stack(z0), np.stack(zc)
    norm = SubbandNorm.fit(zc[:, 0]) if normalize else SubbandNorm()
    return TrainingSet(torch.as_tensor(norm.apply(z0), dtype=dtype), torch.as_tensor(norm.apply(zc), dtype=dtype),
                       [s.id for s in samples], norm)


def attach_pseudo_normals(samples, inpaint_cfg, targets_dir=None):
    """Fill ``sample.vpn`` for every sample: stored targets if present, else Telea on the fly.

    Stored 16-bit planes are re-composited with the mask so pixels outside it
    stay bit-exact copies of V.
    """
    for s in samples:
        if not s.label:
            s.vpn = s.image.value.copy()
            continue
        path = Path(targets_dir) / f"{s.id}.png" if targets_dir else None
        if path is not None and path.exists():
            stored = read_png16(path)
            if stored.shape != s.image.shape:
                raise ValidationError(f"{s.id}: stored target {stored.shape} != image {s.image.shape}")
            s.vpn = np.where(s.mask > 0, stored, s.image.value)
        else:
            s.vpn = pseudo_normal_plane(s.image.value, s.mask, inpaint_cfg)
    return samples


def diffusion_loss(model, z0, zc, sched: NoiseSchedule, gen: torch.Generator, delta_max: int,
                   noise_encoding: bool = True) -> torch.Tensor:
    b = z0.shape[0]
    t = torch.randint(1, sched.T + 1, (b,), generator=gen)
    eps = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
    z_t = forward_noise_batch(z0, t, eps, sched)
    cond = zc
    if noise_encoding:
        delta = draw_delta(gen, b, delta_max)
        cond = encode_condition_batch(zc, delta, torch.randn(zc.shape, generator=gen, dtype=zc.dtype), sched)
    return F.mse_loss(model(z_t, t, cond), eps)


def ddpm_loss(model, z0, zc, sched: NoiseSchedule, gen: torch.Generator) -> torch.Tensor:
    """Plain conditioned DDPM objective with a clean condition."""
    b = z0.shape[0]
    t = torch.randint(1, sched.T + 1, (b,), generator=gen)
    eps = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
    ab = torch.tensor([sched.alpha_bar(int(k)) for k in t], dtype=z0.dtype).view(b, 1, 1, 1)
    z_t = torch.sqrt(ab) * z0 + torch.sqrt(1 - ab) * eps
    return ((model(z_t, t, zc) - eps) ** 2).mean()


def cosine_lambda(total_steps: int):
    def fn(step):
        return 0.5 * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))
    return fn


def make_optimizer(model, cfg, total_steps: int):
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr_init, weight_decay=cfg.weight_decay)
    fn = cosine_lambda(total_steps) if cfg.lr_schedule == "cosine" else (lambda step: 1.0)
    return opt, torch.optim.lr_scheduler.LambdaLR(opt, fn)


def train_step(model, optimizer, z0, zc, sched: NoiseSchedule, gen: torch.Generator, delta_max: int,
               noise_encoding: bool = True, grad_clip: float | None = 1.0, lr_scheduler=None) -> float:
    """One optimizer step; returns the loss. Raises DivergenceError on a non-finite loss."""
    if z0.shape[0] == 0:
        raise ValidationError("empty batch")
    model.train()
    optimizer.zero_grad(set_to_none=True)
    loss = diffusion_loss(model, z0, zc, sched, gen, delta_max, noise_encoding)
    if not torch.isfinite(loss):
        err = DivergenceError(f"non-finite training loss {loss.item()}")
        err.diagnostics = {
            "loss": float(loss.item()),
            "z0_absmax": float(z0.abs().max()),
            "zc_absmax": float(zc.abs().max()),
            "param_nonfinite": [n for n, p in model.named_parameters() if not torch.isfinite(p).all()],
            "lr": optimizer.param_groups[0]["lr"],
        }
        raise err
    loss.backward()
    if grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    if lr_scheduler is not None:
        lr_scheduler.step()
    return float(loss.item())


def schedule_from(cfg) -> NoiseSchedule:
    d = cfg.diffusion
    return build_schedule(d.T, d.beta_start, d.beta_end, d.sampling_steps)


def reconstruct_samples(model, samples, sched, cfg, norm: SubbandNorm | None = None):
    return reconstruct_batch(model, [s.image for s in samples], sched, cfg.wavelet.basis, cfg.sampler,
                             cfg.condition.inference_delta, cfg.diffusion.sampling_steps, norm=norm)


def validation_auc(model, samples, sched, cfg, norm: SubbandNorm | None = None) -> float | None:
    if not samples:
        return None
    recons = reconstruct_samples(model, samples, sched, cfg, norm)
    results = score_images([s.image for s in samples], recons, cfg.detect.signed_residual)
    try:
        return roc_auc(*pool_pixels(results, samples))
    except UndefinedMetricError:
        return None


def checkpoint_meta(cfg, **extra) -> dict:
    from .config import flatten

    # location keys are left out so identical runs in different directories match byte for byte
    conf = {k: v for k, v in flatten(cfg).items() if k not in ("run_name", "output_root", "workers")}
    return {"config": conf, **extra}


@dataclass
class FitResult:
    model: torch.nn.Module
    best_epoch: int
    best_auc: float | None
    norm: SubbandNorm = field(default_factory=SubbandNorm)
    losses: list = field(default_factory=list)
    val_history: list = field(default_factory=list)


def fit(cfg, train_samples, val_samples, run_dir=None) -> FitResult:
    """Train from scratch; validate every ``train.val_every`` epochs and keep the best pixel-AUC model."""
    tc = cfg.train
    sched = schedule_from(cfg)
    data = build_training_set(train_samples, cfg.wavelet.basis, tc.pixel_supervision, tc.flip_augment,
                              cfg.wavelet.normalize)
    model = init_params(cfg.denoiser, seed=tc.seed)
    gen = torch.Generator().manual_seed(tc.seed)
    steps_per_epoch = math.ceil(len(data) / tc.batch_size)
    total = steps_per_epoch * tc.epochs
    optimizer, lr_sched = make_optimizer(model, tc, total)
    n_flip = data.z0.shape[1]

    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir:
        run_dir.mkdir(parents=True, exist_ok=True)
    log_fh = open(run_dir / "train_log.jsonl", "w") if run_dir else None
    result = FitResult(model, 0, None, norm=data.norm)
    best_state = None
    saved: list[Path] = []
    step = 0
    try:
        for epoch in range(1, tc.epochs + 1):
            perm = torch.randperm(len(data), generator=gen)
            for i in range(0, len(data), tc.batch_size):
                idx = perm[i:i + tc.batch_size]
                flips = torch.randint(0, n_flip, (len(idx),), generator=gen)
                z0, zc = data.batch(idx, flips)
                lr = optimizer.param_groups[0]["lr"]
                try:
                    loss = train_step(model, optimizer, z0, zc, sched, gen, cfg.condition.delta_max,
                                      tc.noise_encoding, tc.grad_clip, lr_sched)
                except DivergenceError as err:
                    if run_dir:
                        diag = {"step": step + 1, "epoch": epoch, **getattr(err, "diagnostics", {})}
                        (run_dir / "divergence.json").write_text(json.dumps(diag, indent=2))
                    raise
                step += 1
                result.losses.append(loss)
                if log_fh:
                    log_fh.write(json.dumps({"step": step, "epoch": epoch, "loss": loss, "lr": lr}) + "\n")
            if epoch % tc.val_every == 0 or epoch == tc.epochs:
                auc = validation_auc(model, val_samples, sched, cfg, data.norm)
                result.val_history.append({"epoch": epoch, "step": step, "val_pixel_auc": auc})
                log.info("epoch %d step %d loss %.4f val pixel AUC %s", epoch, step, loss, auc)
                eligible = epoch >= tc.select_from or epoch == tc.epochs
                improved = eligible and (best_state is None or (
                    auc is not None and (result.best_auc is None or auc > result.best_auc)))
                if improved:
                    result.best_epoch, result.best_auc = epoch, auc
                    best_state = {k: v.clone() for k, v in model.state_dict().items()}
                if run_dir:
                    meta = checkpoint_meta(cfg, epoch=epoch, step=step, val_pixel_auc=auc,
                                           subband_norm=data.norm.to_dict())
                    path = run_dir / f"ckpt_{epoch:04d}.bin"
                    checkpoint.save(path, checkpoint.pack_training_state(model, optimizer, gen), meta)
                    saved.append(path)
                    while tc.keep_checkpoints > 0 and len(saved) > tc.keep_checkpoints:
                        saved.pop(0).unlink(missing_ok=True)
                    if improved:
                        checkpoint.save(run_dir / "best.bin", {f"model.{k}": v for k, v in best_state.items()}, meta)
    finally:
        if log_fh:
            log_fh.close()
    if run_dir:
        with open(run_dir / "val_log.jsonl", "w") as fh:
            for rec in result.val_history:
                fh.write(json.dumps(rec) + "\n")
    model.load_state_dict(best_state)
    return result


def load_model(path, denoiser_cfg):
    """(model, norm, meta) from a checkpoint file."""
    tensors, meta = checkpoint.load(path)
    model = init_params(denoiser_cfg, seed=0)
    model.load_state_dict(checkpoint.unpack_model_state(tensors))
    model.eval()
    return model, SubbandNorm.from_dict(meta.get("subband_norm")), meta
