"""Deterministic synthetic fundus-like corpus with exact lesion masks.

Each image is a smooth radial background with a bright disc-like blob, dark
Bezier vessels and a few bright unmasked distractors. Abnormal images add
small dark discs, and only those disc pixels are marked in the mask. The
pre-lesion value plane is written alongside as 16-bit ground truth.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, IngestionError
from .image import ManifestRow, write_manifest, write_png16


@dataclass
class SynthConfig:
    n_images: int = 40
    image_size: tuple[int, int] = (96, 64)  # (width, height)
    split: tuple[int, int, int] = (30, 5, 5)  # train, val, test
    n_vessels: tuple[int, int] = (3, 6)
    vessel_width: tuple[float, float] = (0.8, 1.8)
    vessel_darkening: tuple[float, float] = (0.15, 0.3)
    n_dots: tuple[int, int] = (3, 7)
    dot_radius: tuple[int, int] = (1, 3)
    dot_darkening: tuple[float, float] = (0.3, 0.5)
    n_distractors: tuple[int, int] = (1, 3)
    distractor_gain: tuple[float, float] = (0.1, 0.2)
    noise_std: float = 0.002  # pre-CLAHE; CLAHE roughly triples it
    abnormal_fraction: float = 0.5
    seed: int = 0

    def validate(self):
        w, h = self.image_size
        if w % 2 or h % 2 or w < 16 or h < 16:
            raise ConfigError(f"synth.image_size must be even and >= 16, got {self.image_size}")
        if sum(self.split) != self.n_images:
            raise ConfigError(f"synth.split {self.split} does not sum to synth.n_images {self.n_images}")
        if not 0.0 <= self.abnormal_fraction <= 1.0:
            raise ConfigError("synth.abnormal_fraction must lie in [0, 1]")
        for name in ("n_vessels", "vessel_width", "vessel_darkening", "n_dots", "dot_radius",
                     "dot_darkening", "n_distractors", "distractor_gain"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"synth.{name} range is empty: {lo} > {hi}")
        if self.dot_radius[0] < 1 or self.dot_darkening[1] >= 1.0:
            raise ConfigError("synth.dot_radius must be >= 1 and dot_darkening < 1")


@dataclass
class Rendered:
    rgb: np.ndarray  # uint8 (H, W, 3)
    mask: np.ndarray  # uint8 {0, 1}
    background: np.ndarray  # value plane before lesions were drawn
    dots: list = field(default_factory=list)  # (cy, cx, r)


def disc_offsets(r: int) -> np.ndarray:
    """Lattice offsets whose pixel centers lie within radius ``r`` of a pixel center."""
    d = np.arange(-r, r + 1)
    dy, dx = np.meshgrid(d, d, indexing="ij")
    keep = dy * dy + dx * dx <= r * r
    return np.stack([dy[keep], dx[keep]], axis=1)


def _bezier(p0, p1, p2, p3, n=160):
    s = np.linspace(0.0, 1.0, n)[:, None]
    return ((1 - s) ** 3) * p0 + 3 * ((1 - s) ** 2) * s * p1 + 3 * (1 - s) * s * s * p2 + s ** 3 * p3


def _dist_to_polyline(yy, xx, pts):
    # pixel -> nearest sample point on a densely sampled curve
    d2 = (yy[..., None] - pts[:, 0]) ** 2 + (xx[..., None] - pts[:, 1]) ** 2
    return np.sqrt(d2.min(axis=-1))


def render_image(rng: np.random.Generator, cfg: SynthConfig, abnormal: bool) -> Rendered:
    w, h = cfg.image_size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    scale = min(w, h) / 64.0

    # smooth radial background with a bright disc-like blob
    cy, cx = h * rng.uniform(0.4, 0.6), w * rng.uniform(0.4, 0.6)
    r2 = ((yy - cy) / (0.75 * h)) ** 2 + ((xx - cx) / (0.75 * w)) ** 2
    v = rng.uniform(0.55, 0.7) * (1.0 - 0.35 * r2)
    oy, ox = h * rng.uniform(0.3, 0.7), w * rng.choice([rng.uniform(0.15, 0.3), rng.uniform(0.7, 0.85)])
    od_sigma = rng.uniform(3.5, 5.0) * scale
    v = v + rng.uniform(0.12, 0.2) * np.exp(-((yy - oy) ** 2 + (xx - ox) ** 2) / (2 * od_sigma ** 2))
    for _ in range(3):
        ky, kx, ph = rng.uniform(0.5, 2.0) * 2 * np.pi / h, rng.uniform(0.5, 2.0) * 2 * np.pi / w, rng.uniform(0, 2 * np.pi)
        v = v + 0.015 * np.cos(ky * yy + kx * xx + ph)

    # vessels radiate from the bright blob
    n_v = rng.integers(cfg.n_vessels[0], cfg.n_vessels[1] + 1)
    for _ in range(n_v):
        ang = rng.uniform(0, 2 * np.pi)
        length = rng.uniform(0.6, 1.2) * max(w, h)
        p0 = np.array([oy, ox])
        p3 = p0 + length * np.array([np.sin(ang), np.cos(ang)])
        bend = rng.normal(0, 0.25 * length, size=(2, 2))
        p1 = p0 + (p3 - p0) / 3 + bend[0]
        p2 = p0 + 2 * (p3 - p0) / 3 + bend[1]
        pts = _bezier(p0, p1, p2, p3)
        sigma = rng.uniform(*cfg.vessel_width) * scale / 2
        dist = _dist_to_polyline(yy, xx, pts)
        v = v * (1.0 - rng.uniform(*cfg.vessel_darkening) * np.exp(-dist ** 2 / (2 * sigma ** 2)))

    # bright distractors: normal anatomy as far as the mask is concerned
    for _ in range(rng.integers(cfg.n_distractors[0], cfg.n_distractors[1] + 1)):
        by, bx = rng.uniform(3, h - 3), rng.uniform(3, w - 3)
        bs = rng.uniform(1.0, 2.0) * scale
        v = v + rng.uniform(*cfg.distractor_gain) * np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * bs ** 2))

    v = v + rng.normal(0.0, cfg.noise_std, size=v.shape)
    v = np.clip(v, 0.15, 0.95)
    background = np.round(v * 255.0) / 255.0

    mask = np.zeros((h, w), dtype=np.uint8)
    dots = []
    if abnormal:
        n_d = rng.integers(cfg.n_dots[0], cfg.n_dots[1] + 1)
        tries = 0
        while len(dots) < n_d and tries < 500:
            tries += 1
            r = int(rng.integers(cfg.dot_radius[0], cfg.dot_radius[1] + 1))
            dy, dx = int(rng.integers(r + 2, h - r - 2)), int(rng.integers(r + 2, w - r - 2))
            if any(math.hypot(dy - py, dx - px) < r + pr + 2 for py, px, pr in dots):
                continue
            dots.append((dy, dx, r))
        for dy, dx, r in dots:
            offs = disc_offsets(r)
            mask[dy + offs[:, 0], dx + offs[:, 1]] = 1
        darken = np.ones_like(v)
        for dy, dx, r in dots:
            offs = disc_offsets(r)
            darken[dy + offs[:, 0], dx + offs[:, 1]] = 1.0 - rng.uniform(*cfg.dot_darkening)
        v = v * darken

    # fixed tint keeps V = R = max(R, G, B)
    g_tint = 0.5 + 0.05 * np.cos(2 * np.pi * xx / w)
    rgb = np.stack([v, v * g_tint, v * 0.25], axis=-1)
    rgb8 = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    return Rendered(rgb8, mask, background, dots)


def assign_labels(cfg: SynthConfig, rng: np.random.Generator) -> list[tuple[str, bool]]:
    """(split, abnormal) per image index; abnormal counts are stratified per split."""
    out = []
    for name, n in zip(("train", "val", "test"), cfg.split):
        n_abn = int(math.floor(cfg.abnormal_fraction * n + 0.5))
        flags = np.zeros(n, dtype=bool)
        flags[rng.permutation(n)[:n_abn]] = True
        out.extend((name, bool(f)) for f in flags)
    return out


def generate_corpus(cfg: SynthConfig, out_dir) -> Path:
    """Write images/, masks/, background/ and manifest.csv; returns the manifest path."""
    cfg.validate()
    out = Path(out_dir)
    try:
        for sub in ("images", "masks", "background"):
            (out / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IngestionError(f"cannot create corpus directory {out}: {exc}") from exc
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_images + 1)
    plan = assign_labels(cfg, np.random.default_rng(seeds[-1]))
    rows = []
    for i, (split, abnormal) in enumerate(plan):
        sid = f"img_{i:03d}"
        rend = render_image(np.random.default_rng(seeds[i]), cfg, abnormal)
        Image.fromarray(rend.rgb).save(out / "images" / f"{sid}.png")
        mask_rel = ""
        if abnormal:
            mask_rel = f"masks/{sid}.png"
            Image.fromarray(rend.mask * 255).save(out / mask_rel)
        write_png16(out / "background" / f"{sid}.png", rend.background)
        rows.append(ManifestRow(sid, f"images/{sid}.png", mask_rel, split))
    manifest = out / "manifest.csv"
    write_manifest(manifest, rows)
    return manifest
