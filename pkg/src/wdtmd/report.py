"""Static figures and a markdown summary for finished runs."""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from .errors import IngestionError  # noqa: E402

METRICS = ("auc", "acc", "f1", "sen", "spe")


def _read_json(path: Path):
    try:
        return json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise IngestionError(f"missing eval artifact {path}; run 'eval' first") from exc


def _read_losses(run_dir: Path):
    path = run_dir / "train_log.jsonl"
    if not path.exists():
        return [], []
    steps, losses = [], []
    for line in path.read_text().splitlines():
        rec = json.loads(line)
        steps.append(rec["step"])
        losses.append(rec["loss"])
    return steps, losses


def loss_curve(run_dir: Path, out: Path) -> Path:
    steps, losses = _read_losses(run_dir)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    if losses:
        ax.plot(steps, losses, lw=0.5, alpha=0.4, label="step")
        k = max(1, len(losses) // 50)
        smooth = np.convolve(losses, np.ones(k) / k, mode="valid")
        ax.plot(steps[k - 1:], smooth, lw=1.5, label=f"moving mean ({k})")
        ax.set_yscale("log")
        ax.legend()
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("training loss")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def roc_figure(roc: dict, metrics: dict, out: Path) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.8))
    for ax, level in zip(axes, ("pixel", "image")):
        auc = metrics[level]["auc"]
        ax.plot(roc[level]["fpr"], roc[level]["tpr"], drawstyle="steps-post" if level == "image" else None)
        ax.plot([0, 1], [0, 1], ls=":", c="gray")
        ax.set_title(f"{level} ROC (AUC {auc:.4f})" if auc is not None else f"{level} ROC")
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        ax.set_aspect("equal")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def heatmap_montage(run_dir: Path, out: Path, max_images: int = 10) -> Path:
    paths = sorted((run_dir / "anomaly").glob("*.png"))[:max_images]
    if not paths:
        raise IngestionError(f"no heatmaps under {run_dir / 'anomaly'}")
    n = len(paths)
    cols = min(n, 5)
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(2.4 * cols, 1.9 * rows), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for ax, p in zip(axes.ravel(), paths):
        ax.imshow(np.asarray(Image.open(p)), cmap="inferno", vmin=0, vmax=255)
        ax.set_title(p.stem, fontsize=8)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def _fmt(v):
    return "n/a" if v is None else repr(v)


def summary_markdown(metrics: dict, run_dir: Path) -> str:
    lines = [f"# {run_dir.name}", "", "| level | " + " | ".join(m.upper() for m in METRICS) + " | TP | FP | TN | FN |",
             "|---" * (len(METRICS) + 5) + "|"]
    for level in ("pixel", "image"):
        m = metrics[level]
        lines.append(f"| {level} | " + " | ".join(_fmt(m[k]) for k in METRICS) + " | "
                     + " | ".join(str(m[k]) for k in ("tp", "fp", "tn", "fn")) + " |")
    thr = metrics["thresholds"]
    lines += ["", f"Thresholds ({thr['source']}): pixel {_fmt(thr['pixel'])}, image {_fmt(thr['image'])}.",
              f"Heatmap normalization: min {_fmt(metrics['heatmap_normalization']['min'])}, "
              f"max {_fmt(metrics['heatmap_normalization']['max'])}.",
              f"Test images: {metrics['n_images']}; checkpoint epoch: {metrics.get('checkpoint_epoch')}.", ""]
    return "\n".join(lines)


def collect_sweep(run_dirs) -> list[dict]:
    points = []
    for d in run_dirs:
        path = Path(d) / "metrics.json"
        if path.exists():
            m = json.loads(path.read_text())
            points.append({"run": Path(d).name, "delta_max": m["condition"]["delta_max"],
                           **{f"{lvl}_{k}": m[lvl][k] for lvl in ("pixel", "image") for k in METRICS}})
    return sorted(points, key=lambda p: (p["delta_max"], p["run"]))


def sweep_figure(points: list[dict], out: Path) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.4), sharey=True)
    xs = [p["delta_max"] for p in points]
    for ax, level in zip(axes, ("pixel", "image")):
        for k in METRICS:
            ys = [np.nan if p[f"{level}_{k}"] is None else p[f"{level}_{k}"] for p in points]
            ax.plot(xs, ys, marker="o", label=k.upper())
        ax.set_xscale("log")
        ax.set_xlabel("delta_max")
        ax.set_title(f"{level} level")
    axes[0].set_ylabel("metric")
    axes[1].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def report(run_dir, sweep_dirs=None) -> list[Path]:
    """Loss curve, ROC curves, heatmap montage and summary.md; a delta_max sweep when runs differ in it."""
    run_dir = Path(run_dir)
    metrics = _read_json(run_dir / "metrics.json")
    roc = _read_json(run_dir / "roc.json")
    written = [loss_curve(run_dir, run_dir / "loss_curve.png"),
               roc_figure(roc, metrics, run_dir / "roc.png"),
               heatmap_montage(run_dir, run_dir / "heatmaps.png")]
    summary = run_dir / "summary.md"
    summary.write_text(summary_markdown(metrics, run_dir))
    written.append(summary)

    if sweep_dirs is None:
        sweep_dirs = sorted(p for p in run_dir.parent.iterdir() if p.is_dir())
    else:
        sweep_dirs = [run_dir, *sweep_dirs]
    points = collect_sweep(dict.fromkeys(Path(p) for p in sweep_dirs))
    if len({p["delta_max"] for p in points}) > 1:
        (run_dir / "delta_sweep.json").write_text(json.dumps(points, indent=2) + "\n")
        written.append(sweep_figure(points, run_dir / "delta_sweep.png"))
        written.append(run_dir / "delta_sweep.json")
    return written
