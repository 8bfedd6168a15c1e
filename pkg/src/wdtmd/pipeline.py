"""Run-level steps shared by the CLI, the experiment scripts and the acceptance tests."""
from __future__ import annotations

import hashlib
import json
import logging
import os
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .config import RunConfig, dump_text
from .detect import evaluate, roc_curve, pool_pixels, score_images, select_thresholds
from .errors import IngestionError, ValidationError
from .image import load_dataset, read_manifest, split_samples, write_png16
from .inpaint import pseudo_normal_plane
from .synth import generate_corpus
from .train import attach_pseudo_normals, fit, load_model, reconstruct_samples, schedule_from

log = logging.getLogger(__name__)

TARGETS_DIR = "pseudo_normal"


def corpus_root(cfg: RunConfig) -> Path:
    return Path(cfg.data.root)


def load_corpus(cfg: RunConfig):
    return load_dataset(corpus_root(cfg), cfg.data.manifest_path(), cfg.preprocess, cfg.workers)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def manifest_lock(cfg: RunConfig) -> dict:
    """Content hashes of the manifest and every file it references."""
    manifest = cfg.data.manifest_path()
    if not manifest.exists():
        return {"manifest": str(manifest), "present": False}
    root = corpus_root(cfg)
    files = {}
    for row in read_manifest(manifest):
        for rel in (row.image_path, row.mask_path):
            if rel and (root / rel).exists():
                files[rel] = _sha256(root / rel)
    targets = root / TARGETS_DIR
    if targets.is_dir():
        for p in sorted(targets.glob("*.png")):
            files[f"{TARGETS_DIR}/{p.name}"] = _sha256(p)
    import torch

    return {"manifest": manifest.name, "manifest_sha256": _sha256(manifest), "files": files,
            "versions": {"wdtmd": __version__, "numpy": np.__version__, "torch": torch.__version__}}


def write_run_records(cfg: RunConfig, run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.resolved").write_text(dump_text(cfg))
    (run_dir / "manifest.lock").write_text(json.dumps(manifest_lock(cfg), indent=2, sort_keys=True) + "\n")


def make_corpus(cfg: RunConfig, out_dir=None) -> Path:
    out = Path(out_dir) if out_dir else corpus_root(cfg)
    return generate_corpus(cfg.synth, out)


def make_targets(cfg: RunConfig, samples=None) -> list[str]:
    """Inpaint every abnormal training image and store V_pn as 16-bit PNGs."""
    samples = samples if samples is not None else load_corpus(cfg)
    out = corpus_root(cfg) / TARGETS_DIR
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for s in split_samples(samples, "train"):
        if not s.label:
            continue
        write_png16(out / f"{s.id}.png", pseudo_normal_plane(s.image.value, s.mask, cfg.inpaint))
        written.append(s.id)
    return written


def train_run(cfg: RunConfig, run_dir: Path | None = None, samples=None):
    samples = samples if samples is not None else load_corpus(cfg)
    train, val = split_samples(samples, "train"), split_samples(samples, "val")
    if not train:
        raise ValidationError("no samples in the train split")
    targets = corpus_root(cfg) / TARGETS_DIR
    attach_pseudo_normals(train, cfg.inpaint, targets if targets.is_dir() else None)
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    return fit(cfg, train, val, run_dir)


def _checkpoint(run_dir: Path, name: str = "best.bin") -> Path:
    path = run_dir / name
    if not path.exists():
        raise IngestionError(f"no checkpoint at {path}; run 'train' first")
    return path


def infer_run(cfg: RunConfig, run_dir: Path, split: str = "test", samples=None) -> list[str]:
    """Write 16-bit reconstructed value planes to ``recon/<id>.png``."""
    samples = samples if samples is not None else load_corpus(cfg)
    chosen = split_samples(samples, split)
    if not chosen:
        raise ValidationError(f"no samples in split {split!r}")
    model, norm, _ = load_model(_checkpoint(run_dir), cfg.denoiser)
    recons = reconstruct_samples(model, chosen, schedule_from(cfg), cfg, norm)
    out = run_dir / "recon"
    out.mkdir(parents=True, exist_ok=True)
    for s, r in zip(chosen, recons):
        write_png16(out / f"{s.id}.png", r.value)
    return [s.id for s in chosen]


def _downsample_curve(fpr, tpr, n=1000):
    if len(fpr) <= n:
        return fpr, tpr
    idx = np.unique(np.linspace(0, len(fpr) - 1, n).round().astype(int))
    return fpr[idx], tpr[idx]


def eval_run(cfg: RunConfig, run_dir: Path, samples=None, model=None, norm=None) -> dict:
    """Thresholds from validation, metrics on test; writes metrics.json, roc.json, anomaly/<id>.png."""
    samples = samples if samples is not None else load_corpus(cfg)
    val, test = split_samples(samples, "val"), split_samples(samples, "test")
    if not test:
        raise ValidationError("no samples in the test split")
    meta = {}
    if model is None:
        model, norm, meta = load_model(_checkpoint(run_dir), cfg.denoiser)
    sched = schedule_from(cfg)
    signed = cfg.detect.signed_residual

    thr_src = "config"
    px_thr, img_thr = cfg.thresholds.pixel, cfg.thresholds.image
    if px_thr is None or img_thr is None:
        if not val:
            raise ValidationError("threshold selection needs a validation split")
        val_res = score_images([s.image for s in val], reconstruct_samples(model, val, sched, cfg, norm), signed)
        auto_px, auto_img = select_thresholds(val_res, val)
        px_thr = auto_px if px_thr is None else px_thr
        img_thr = auto_img if img_thr is None else img_thr
        thr_src = "validation-f1"

    results = score_images([s.image for s in test], reconstruct_samples(model, test, sched, cfg, norm), signed)
    pixel, image = evaluate(results, test, px_thr, img_thr)

    lo = float(min(r.anomaly_map.min() for r in results))
    hi = float(max(r.anomaly_map.max() for r in results))
    scale = hi - lo if hi > lo else 1.0
    amap_dir = run_dir / "anomaly"
    amap_dir.mkdir(parents=True, exist_ok=True)
    for r in results:
        img8 = np.clip(np.round((r.anomaly_map - lo) / scale * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img8).save(amap_dir / f"{r.source_id}.png")

    metrics = {
        "pixel": pixel.to_dict(),
        "image": image.to_dict(),
        "thresholds": {"pixel": px_thr, "image": img_thr, "source": thr_src},
        "heatmap_normalization": {"min": lo, "max": hi},
        "split": "test",
        "n_images": len(test),
        "checkpoint_epoch": meta.get("epoch"),
        "condition": {"delta_max": cfg.condition.delta_max, "inference_delta": cfg.condition.inference_delta},
        "train": {"seed": cfg.train.seed, "noise_encoding": cfg.train.noise_encoding,
                  "pixel_supervision": cfg.train.pixel_supervision},
    }
    px_scores, px_labels = pool_pixels(results, test)
    fpr, tpr, _ = roc_curve(px_scores, px_labels)
    fpr, tpr = _downsample_curve(fpr, tpr)
    ifpr, itpr, _ = roc_curve([r.image_score for r in results], [s.label for s in test])
    roc = {
        "pixel": {"fpr": fpr.tolist(), "tpr": tpr.tolist()},
        "image": {"fpr": ifpr.tolist(), "tpr": itpr.tolist()},
        "image_scores": {r.source_id: r.image_score for r in results},
        "image_labels": {s.id: s.label for s in test},
    }
    np.savez_compressed(run_dir / "anomaly_maps.npz", **{r.source_id: r.anomaly_map for r in results},
                        **{f"mask.{s.id}": s.mask for s in test})
    (run_dir / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    (run_dir / "roc.json").write_text(json.dumps(roc, sort_keys=True) + "\n")
    return metrics


def run_experiment(cfg: RunConfig, run_dir: Path | None = None) -> dict:
    """synth and synth-targets when missing, then train and eval; the CLI sequence in one call."""
    run_dir = Path(run_dir) if run_dir is not None else cfg.run_dir()
    with RunLock(run_dir):
        if not cfg.data.manifest_path().exists():
            make_corpus(cfg)
        samples = load_corpus(cfg)
        if not (corpus_root(cfg) / TARGETS_DIR).is_dir():
            make_targets(cfg, samples)
        train_run(cfg, run_dir, samples)
        metrics = eval_run(cfg, run_dir, samples)
        write_run_records(cfg, run_dir)
    return metrics


def load_anomaly_maps(run_dir: Path):
    """(pooled pixel scores, pooled labels) from the maps saved by eval_run."""
    with np.load(Path(run_dir) / "anomaly_maps.npz") as data:
        ids = sorted(k for k in data.files if not k.startswith("mask."))
        scores = np.concatenate([data[i].ravel() for i in ids])
        labels = np.concatenate([data[f"mask.{i}"].ravel() for i in ids])
    return scores, labels


class RunLock:
    """Exclusive ownership of a run directory through an O_EXCL lock file."""

    def __init__(self, run_dir: Path):
        self.path = Path(run_dir) / ".lock"

    def __enter__(self):
        from .errors import WDTError

        self.path.parent.mkdir(parents=True, exist_ok=True)
        for _ in range(2):
            try:
                fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            except FileExistsError:
                if self._stale():
                    self.path.unlink(missing_ok=True)
                    continue
                err = WDTError(f"run directory {self.path.parent} is locked by another process")
                err.category = "locked"
                raise err
            with os.fdopen(fd, "w") as fh:
                fh.write(str(os.getpid()))
            return self
        raise IngestionError(f"cannot acquire {self.path}")

    def _stale(self) -> bool:
        try:
            pid = int(self.path.read_text().strip() or 0)
        except (OSError, ValueError):
            return True
        if pid <= 0:
            return True
        try:
            os.kill(pid, 0)
        except ProcessLookupError:
            return True
        except PermissionError:
            return False
        return False

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False
