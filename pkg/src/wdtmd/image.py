"""Image ingestion and preprocessing: HSV split, CLAHE, bilinear resize, manifests."""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, IngestionError, ValidationError

log = logging.getLogger(__name__)

MANIFEST_FIELDS = ("id", "image_path", "mask_path", "split")
SPLITS = ("train", "val", "test")


@dataclass
class HsvImage:
    hue: np.ndarray
    saturation: np.ndarray
    value: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        shapes = {self.hue.shape, self.saturation.shape, self.value.shape}
        if len(shapes) != 1:
            raise ValidationError(f"HSV planes disagree in shape: {shapes}")

    @property
    def shape(self):
        return self.value.shape

    def with_value(self, value: np.ndarray) -> "HsvImage":
        return HsvImage(self.hue, self.saturation, value, self.source_id)


@dataclass
class Sample:
    image: HsvImage
    mask: np.ndarray
    split: str = "train"
    vpn: np.ndarray | None = None  # pseudo-normal value plane, filled in before training

    def __post_init__(self):
        if self.mask.shape != self.image.shape:
            raise ValidationError(
                f"{self.image.source_id}: mask shape {self.mask.shape} != image shape {self.image.shape}")
        self.mask = (self.mask > 0).astype(np.uint8)

    @property
    def id(self) -> str:
        return self.image.source_id

    @property
    def label(self) -> int:
        return int(self.mask.any())


@dataclass
class PreprocessConfig:
    clahe: bool = True
    clahe_tiles: tuple[int, int] = (8, 8)  # (rows, cols)
    clahe_clip: float = 2.0
    resize: tuple[int, int] = (300, 200)  # (width, height)


# ---------------------------------------------------------------- HSV

def decompose_hsv(rgb: np.ndarray, source_id: str = "") -> HsvImage:
    """RGB in [0, 1] (H, W, 3) -> hue/saturation/value planes, hue in [0, 1)."""
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=-1)
    c = v - rgb.min(axis=-1)
    s = np.divide(c, v, out=np.zeros_like(v), where=v > 0)
    safe = np.where(c > 0, c, 1.0)
    h = np.where(v == r, ((g - b) / safe) % 6.0,
                 np.where(v == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    h = np.where(c > 0, h / 6.0, 0.0)
    return HsvImage(h, s, v, source_id)


def recompose_hsv(img: HsvImage) -> np.ndarray:
    h6 = (img.hue % 1.0) * 6.0
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    v, s = img.value, img.saturation
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    table = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    out = np.zeros(v.shape + (3,))
    for k, chans in enumerate(table):
        sel = i == k
        for ch in range(3):
            out[..., ch][sel] = chans[ch][sel]
    return out


# ---------------------------------------------------------------- CLAHE

def _tile_edges(n: int, tiles: int) -> np.ndarray:
    return np.round(np.linspace(0, n, tiles + 1)).astype(int)


def clip_histogram(hist: np.ndarray, limit: float) -> np.ndarray:
    """Clip at ``limit`` and spread the excess uniformly over all bins, one pass."""
    excess = np.maximum(hist - limit, 0.0).sum()
    return np.minimum(hist, limit) + excess / hist.size


def tile_mappings(levels: np.ndarray, tiles=(8, 8), clip_limit=2.0):
    """Per-tile clipped histograms and midpoint-CDF maps.

    Returns ``(hists, maps)`` with shapes (rows, cols, 256); ``maps[i, j, l]``
    is where level ``l`` lands in [0, 1] for tile (i, j).
    """
    rows, cols = tiles
    ey, ex = _tile_edges(levels.shape[0], rows), _tile_edges(levels.shape[1], cols)
    hists = np.zeros((rows, cols, 256))
    maps = np.zeros((rows, cols, 256))
    for i in range(rows):
        for j in range(cols):
            tile = levels[ey[i]:ey[i + 1], ex[j]:ex[j + 1]]
            hist = np.bincount(tile.ravel(), minlength=256).astype(np.float64)
            if np.isfinite(clip_limit):
                hist = clip_histogram(hist, max(clip_limit * tile.size / 256.0, 1.0))
            cdf = np.cumsum(hist)
            hists[i, j] = hist
            maps[i, j] = (cdf - 0.5 * hist) / cdf[-1]
    return hists, maps


def _interp_coords(n: int, tiles: int):
    edges = _tile_edges(n, tiles)
    centers = 0.5 * (edges[:-1] + edges[1:]) - 0.5
    pos = np.interp(np.arange(n), centers, np.arange(tiles)) if tiles > 1 else np.zeros(n)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, tiles - 1)
    return i0, i1, pos - i0


def clahe(value: np.ndarray, tiles=(8, 8), clip_limit: float = 2.0) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization on an 8-bit quantized plane.

    Tile maps are blended bilinearly between tile centers; pixels outside the
    outermost centers use the nearest tile(s).
    """
    value = np.asarray(value, dtype=np.float64)
    rows, cols = tiles
    if rows < 1 or cols < 1:
        raise ConfigError(f"CLAHE tile grid must be >= (1, 1), got {tiles}")
    if not clip_limit > 0:
        raise ConfigError(f"CLAHE clip limit must be positive, got {clip_limit}")
    if rows > value.shape[0] or cols > value.shape[1]:
        raise ConfigError(f"CLAHE tile grid {tiles} larger than image {value.shape}")
    levels = np.clip(np.round(value * 255.0), 0, 255).astype(np.intp)
    _, maps = tile_mappings(levels, tiles, clip_limit)
    y0, y1, wy = _interp_coords(value.shape[0], rows)
    x0, x1, wx = _interp_coords(value.shape[1], cols)
    wy, wx = wy[:, None], wx[None, :]

    def look(iy, ix):
        return maps[iy[:, None], ix[None, :], levels]

    out = ((1 - wy) * ((1 - wx) * look(y0, x0) + wx * look(y0, x1))
           + wy * ((1 - wx) * look(y1, x0) + wx * look(y1, x1)))
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------- resize

def _check_target(target):
    w, h = target
    if w < 2 or h < 2 or w % 2 or h % 2:
        raise ConfigError(f"resize target must be even and >= 2 in both dims, got {target}")


def _axis_weights(n_in: int, n_out: int):
    if n_out == 1 or n_in == 1:
        src = np.zeros(n_out)
    else:
        src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.floor(src).astype(int)
    i0 = np.minimum(i0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(image: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Separable bilinear resize to ``target = (width, height)``, corner pixel centers aligned."""
    _check_target(target)
    image = np.asarray(image)
    w, h = target
    if image.shape[:2] == (h, w):
        return image.copy()
    out = image.astype(np.float64)
    y0, y1, wy = _axis_weights(image.shape[0], h)
    wy = wy.reshape((-1,) + (1,) * (out.ndim - 1))
    out = (1 - wy) * out[y0] + wy * out[y1]
    x0, x1, wx = _axis_weights(image.shape[1], w)
    wx = wx.reshape((1, -1) + (1,) * (out.ndim - 2))
    return (1 - wx) * out[:, x0] + wx * out[:, x1]


def resize_mask(mask: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize on the same coordinate map, then re-binarized."""
    _check_target(target)
    w, h = target
    if mask.shape == (h, w):
        return (mask > 0).astype(np.uint8)

    def nearest(n_in, n_out):
        if n_out == 1:
            return np.zeros(1, dtype=int)
        return np.round(np.arange(n_out) * (n_in - 1) / (n_out - 1)).astype(int)

    out = np.asarray(mask)[nearest(mask.shape[0], h)][:, nearest(mask.shape[1], w)]
    return (out > 0.5).astype(np.uint8)


# ---------------------------------------------------------------- IO

def read_rgb(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except FileNotFoundError as exc:
        raise IngestionError(f"missing image file: {path}") from exc
    except OSError as exc:
        raise IngestionError(f"cannot decode image {path}: {exc}") from exc


def read_mask(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except FileNotFoundError as exc:
        raise IngestionError(f"missing mask file: {path}") from exc
    except OSError as exc:
        raise IngestionError(f"cannot decode mask {path}: {exc}") from exc
    if arr.ndim == 3:
        arr = arr.max(axis=-1)
    return (arr > 0).astype(np.uint8)


def write_png16(path: Path, plane: np.ndarray):
    q = np.round(np.clip(plane, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(q).save(path)


def read_png16(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im, dtype=np.float64) / 65535.0
    except FileNotFoundError as exc:
        raise IngestionError(f"missing file: {path}") from exc


@dataclass
class ManifestRow:
    id: str
    image_path: str
    mask_path: str
    split: str


def read_manifest(manifest: Path) -> list[ManifestRow]:
    manifest = Path(manifest)
    try:
        with open(manifest, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                return []
            missing = set(MANIFEST_FIELDS) - set(reader.fieldnames)
            if missing:
                raise ValidationError(f"manifest {manifest} lacks columns {sorted(missing)}")
            rows = [ManifestRow(r["id"], r["image_path"], r["mask_path"] or "", r["split"]) for r in reader]
    except FileNotFoundError as exc:
        raise IngestionError(f"missing manifest: {manifest}") from exc
    for r in rows:
        if r.split not in SPLITS:
            raise ValidationError(f"manifest row {r.id}: unknown split {r.split!r}")
    return rows


def write_manifest(manifest: Path, rows: list[ManifestRow]):
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for r in rows:
            writer.writerow([r.id, r.image_path, r.mask_path, r.split])


def preprocess(rgb: np.ndarray, mask: np.ndarray, cfg: PreprocessConfig, source_id=""):
    """CLAHE on V, then resize every plane; masks go nearest-neighbour."""
    img = decompose_hsv(rgb, source_id)
    v = img.value
    if cfg.clahe:
        v = clahe(v, cfg.clahe_tiles, cfg.clahe_clip)
    target = tuple(cfg.resize)
    hue = resize_bilinear(img.hue, target)
    sat = np.clip(resize_bilinear(img.saturation, target), 0.0, 1.0)
    v = np.clip(resize_bilinear(v, target), 0.0, 1.0)
    return HsvImage(hue, sat, v, source_id), resize_mask(mask, target)


def _load_row(root: Path, row: ManifestRow, cfg: PreprocessConfig) -> Sample:
    rgb = read_rgb(root / row.image_path)
    if row.mask_path:
        mask = read_mask(root / row.mask_path)
    else:
        mask = np.zeros(rgb.shape[:2], dtype=np.uint8)
    if mask.shape != rgb.shape[:2]:
        raise ValidationError(f"{row.id}: mask shape {mask.shape} != image shape {rgb.shape[:2]}")
    img, m = preprocess(rgb, mask, cfg, row.id)
    return Sample(img, m, row.split)


def load_dataset(root_path, manifest, cfg: PreprocessConfig | None = None, workers: int = 1) -> list[Sample]:
    """Load and preprocess every manifest row, in manifest order.

    Paths in the manifest are resolved against ``root_path``.
    """
    cfg = cfg or PreprocessConfig()
    root = Path(root_path)
    rows = read_manifest(Path(manifest))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(lambda r: _load_row(root, r, cfg), rows))
    return [_load_row(root, r, cfg) for r in rows]


def split_samples(samples, split: str) -> list[Sample]:
    return [s for s in samples if s.split == split]


def hsv_variance_report(samples) -> dict:
    """Mean per-plane variance across samples; a crude information proxy."""
    if not samples:
        return {"hue": 0.0, "saturation": 0.0, "value": 0.0, "value_dominant": False}
    rep = {
        name: float(np.mean([np.var(getattr(s.image, name)) for s in samples]))
        for name in ("hue", "saturation", "value")
    }
    rep["value_dominant"] = rep["value"] >= rep["hue"] and rep["value"] >= rep["saturation"]
    return rep
