"""Fast-marching (Telea) inpainting and pseudo-normal target synthesis."""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateInputError, ValidationError

KNOWN, BAND, INSIDE = 0, 1, 2
_NEIGHBOURS = ((-1, 0), (0, -1), (0, 1), (1, 0))


@dataclass
class InpaintConfig:
    radius: int = 3
    dilate: int = 0  # grow the mask by this many pixels before inpainting

    def validate(self):
        if self.radius < 1:
            raise ConfigError(f"inpaint.radius must be >= 1, got {self.radius}")
        if self.dilate < 0:
            raise ConfigError("inpaint.dilate must be >= 0")


def _solve(t, flag, y1, x1, y2, x2):
    """Eikonal update from the two neighbours (y1, x1) and (y2, x2)."""
    h, w = t.shape
    ok1 = 0 <= y1 < h and 0 <= x1 < w and flag[y1, x1] != INSIDE
    ok2 = 0 <= y2 < h and 0 <= x2 < w and flag[y2, x2] != INSIDE
    if ok1 and ok2:
        t1, t2 = t[y1, x1], t[y2, x2]
        d = 2.0 - (t1 - t2) ** 2
        if d > 0.0:
            r = math.sqrt(d)
            s = (t1 + t2 - r) / 2.0
            if s >= t1 and s >= t2:
                return s
            s += r
            if s >= t1 and s >= t2:
                return s
        return 1.0 + min(t1, t2)
    if ok1:
        return 1.0 + t[y1, x1]
    if ok2:
        return 1.0 + t[y2, x2]
    return math.inf


def _grad_t(t, flag, y, x):
    h, w = t.shape

    def known(yy, xx):
        return 0 <= yy < h and 0 <= xx < w and flag[yy, xx] != INSIDE

    def partial(dy, dx):
        fwd, bwd = known(y + dy, x + dx), known(y - dy, x - dx)
        if fwd and bwd:
            return 0.5 * (t[y + dy, x + dx] - t[y - dy, x - dx])
        if fwd:
            return t[y + dy, x + dx] - t[y, x]
        if bwd:
            return t[y, x] - t[y - dy, x - dx]
        return 0.0

    return partial(1, 0), partial(0, 1)


def _window(radius):
    offs = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)
            if 0 < dy * dy + dx * dx <= radius * radius]
    return np.array(offs, dtype=int)


def _estimate(img, t, flag, y, x, offs):
    h, w = img.shape
    gy, gx = _grad_t(t, flag, y, x)
    gn = math.hypot(gy, gx)
    ny, nx = (gy / gn, gx / gn) if gn > 0 else (0.0, 0.0)
    qy, qx = y + offs[:, 0], x + offs[:, 1]
    ok = (qy >= 0) & (qy < h) & (qx >= 0) & (qx < w)
    qy, qx, oy, ox = qy[ok], qx[ok], offs[ok, 0], offs[ok, 1]
    ok = flag[qy, qx] != INSIDE
    qy, qx, oy, ox = qy[ok], qx[ok], oy[ok], ox[ok]
    # vector from q to p is -offset
    dist2 = (oy * oy + ox * ox).astype(np.float64)
    dist = np.sqrt(dist2)
    if gn > 0:
        direction = np.abs(-(oy * ny + ox * nx)) / dist
    else:
        direction = np.ones_like(dist)
    direction = np.maximum(direction, 1e-6)
    level = 1.0 / (1.0 + np.abs(t[y, x] - t[qy, qx]))
    wts = direction * level / dist2
    return float(np.dot(wts, img[qy, qx]) / wts.sum())


def telea_inpaint(v: np.ndarray, mask: np.ndarray, cfg: InpaintConfig | None = None,
                  trace: list | None = None) -> np.ndarray:
    """Fill ``mask`` pixels of ``v`` by fast marching inward from the hole boundary.

    Each unknown pixel, when reached by the front, becomes the normalized
    weighted mean of non-unknown pixels within ``cfg.radius``; the weight is
    the product of a direction term (alignment with the front normal), an
    inverse squared distance term and a level-set proximity term. Pixels are
    finalized in nondecreasing arrival time with row-major tie breaking. If
    ``trace`` is given, ``(arrival_time, row, col)`` is appended for every
    finalized pixel.
    """
    cfg = cfg or InpaintConfig()
    cfg.validate()
    v = np.asarray(v, dtype=np.float64)
    mask = np.asarray(mask) > 0
    if mask.shape != v.shape:
        raise ValidationError(f"mask shape {mask.shape} != plane shape {v.shape}")
    out = v.copy()
    if not mask.any():
        return out
    if mask.all():
        raise DegenerateInputError("mask covers the whole plane; nothing to inpaint from")

    h, w = v.shape
    flag = np.where(mask, INSIDE, KNOWN).astype(np.int8)
    t = np.where(mask, np.inf, 0.0)
    heap = []
    for y, x in zip(*np.nonzero(~mask)):
        for dy, dx in _NEIGHBOURS:
            yy, xx = y + dy, x + dx
            if 0 <= yy < h and 0 <= xx < w and mask[yy, xx]:
                flag[y, x] = BAND
                heap.append((0.0, y * w + x))
                break
    heapq.heapify(heap)
    offs = _window(cfg.radius)

    while heap:
        arrival, idx = heapq.heappop(heap)
        y, x = divmod(idx, w)
        if flag[y, x] == KNOWN:
            continue
        flag[y, x] = KNOWN
        if trace is not None:
            trace.append((arrival, y, x))
        for dy, dx in _NEIGHBOURS:
            yy, xx = y + dy, x + dx
            if not (0 <= yy < h and 0 <= xx < w) or flag[yy, xx] != INSIDE:
                continue
            t[yy, xx] = min(
                _solve(t, flag, yy - 1, xx, yy, xx - 1),
                _solve(t, flag, yy + 1, xx, yy, xx - 1),
                _solve(t, flag, yy - 1, xx, yy, xx + 1),
                _solve(t, flag, yy + 1, xx, yy, xx + 1),
            )
            out[yy, xx] = _estimate(out, t, flag, yy, xx, offs)
            flag[yy, xx] = BAND
            heapq.heappush(heap, (t[yy, xx], yy * w + xx))
    return out


def dilate_mask(mask: np.ndarray, steps: int) -> np.ndarray:
    m = np.asarray(mask) > 0
    for _ in range(steps):
        grown = m.copy()
        grown[1:] |= m[:-1]
        grown[:-1] |= m[1:]
        grown[:, 1:] |= m[:, :-1]
        grown[:, :-1] |= m[:, 1:]
        m = grown
    return m


def pseudo_normal_plane(v: np.ndarray, mask: np.ndarray, cfg: InpaintConfig | None = None) -> np.ndarray:
    """V_pn = (1 - M) * V + M * inpaint(V, M), composited without arithmetic."""
    cfg = cfg or InpaintConfig()
    m = dilate_mask(mask, cfg.dilate) if cfg.dilate else np.asarray(mask) > 0
    v = np.asarray(v, dtype=np.float64)
    if not m.any():
        return v.copy()
    return np.where(m, telea_inpaint(v, m, cfg), v)


def synthesize_pseudo_normal(sample, cfg: InpaintConfig | None = None) -> np.ndarray:
    return pseudo_normal_plane(sample.image.value, sample.mask, cfg)
