"""Residual anomaly maps, image scores, thresholds and the five detection metrics."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedMetricError, ValidationError

log = logging.getLogger(__name__)

FALLBACK_PERCENTILE = 99.5


@dataclass
class AnomalyResult:
    source_id: str
    anomaly_map: np.ndarray
    image_score: float
    pixel_thr: float = math.inf
    image_thr: float = math.inf

    @property
    def pixel_pred(self) -> np.ndarray:
        return (self.anomaly_map > self.pixel_thr).astype(np.uint8)

    @property
    def image_pred(self) -> int:
        return int(self.image_score > self.image_thr)


@dataclass
class MetricsReport:
    level: str
    auc: float | None
    acc: float
    f1: float
    sen: float
    spe: float
    tp: int
    fp: int
    tn: int
    fn: int

    @classmethod
    def from_counts(cls, level, auc, tp, fp, tn, fn):
        return cls(level, auc, _ratio(tp + tn, tp + tn + fp + fn), _ratio(2 * tp, 2 * tp + fp + fn),
                   _ratio(tp, tp + fn), _ratio(tn, tn + fp), int(tp), int(fp), int(tn), int(fn))

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}


def _ratio(num, den) -> float:
    return float(num) / float(den) if den else math.nan


def compute_anomaly_map(inp, recon, signed: bool = False) -> np.ndarray:
    """|V_recon - V_input|, or its positive part when ``signed``."""
    if inp.shape != recon.shape:
        raise ValidationError(f"input {inp.shape} and reconstruction {recon.shape} differ in shape")
    diff = np.asarray(recon.value, dtype=np.float64) - np.asarray(inp.value, dtype=np.float64)
    return np.maximum(diff, 0.0) if signed else np.abs(diff)


def image_score(anomaly_map: np.ndarray) -> float:
    """Population standard deviation of the map."""
    return float(np.std(anomaly_map))


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC with midranks for ties."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValidationError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative labels")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores, labels):
    """(fpr, tpr, thresholds) over all distinct scores, starting at (0, 0)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tps = np.cumsum(y)[last]
    fps = (last + 1) - tps
    n_pos, n_neg = max(int(y.sum()), 1), max(int((~y).sum()), 1)
    return (np.r_[0.0, fps / n_neg], np.r_[0.0, tps / n_pos], np.r_[np.inf, s[last]])


def confusion(pred, labels) -> tuple[int, int, int, int]:
    pred = np.asarray(pred).ravel().astype(bool)
    labels = np.asarray(labels).ravel().astype(bool)
    tp = int(np.sum(pred & labels))
    fp = int(np.sum(pred & ~labels))
    tn = int(np.sum(~pred & ~labels))
    fn = int(np.sum(~pred & labels))
    return tp, fp, tn, fn


def _safe_auc(scores, labels):
    try:
        return roc_auc(scores, labels)
    except UndefinedMetricError:
        return None


def level_report(level, scores, labels, thr) -> MetricsReport:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    return MetricsReport.from_counts(level, _safe_auc(scores, labels), *confusion(scores > thr, labels))


def pool_pixels(results, samples):
    scores = np.concatenate([r.anomaly_map.ravel() for r in results])
    labels = np.concatenate([s.mask.ravel() for s in samples])
    return scores, labels


def evaluate(results, samples, pixel_thr: float, image_thr: float) -> tuple[MetricsReport, MetricsReport]:
    """Pixel metrics pool every pixel of every image; image metrics use one score per image."""
    if not results:
        raise ValidationError("nothing to evaluate")
    if len(results) != len(samples):
        raise ValidationError("results and samples differ in length")
    px_scores, px_labels = pool_pixels(results, samples)
    pixel = level_report("pixel", px_scores, px_labels, pixel_thr)
    img = level_report("image", [r.image_score for r in results], [s.label for s in samples], image_thr)
    return pixel, img


def best_f1_threshold(scores, labels) -> tuple[float, float]:
    """Observed score maximizing F1 of ``score > thr``; ties go to the larger threshold."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    # candidate thr = s[j]: predicted positive are strictly greater scores
    uniq_last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]  # last index of each distinct value
    cum_tp = np.r_[0, np.cumsum(y)]
    n_pos = int(y.sum())
    first = np.r_[0, uniq_last[:-1] + 1]  # first index of each distinct value
    tp = cum_tp[first]
    fp = first - tp
    fn = n_pos - tp
    f1 = np.where(2 * tp + fp + fn > 0, 2 * tp / np.maximum(2 * tp + fp + fn, 1), 0.0)
    best = np.max(f1)
    # distinct values are in descending order, so the first maximizer is the largest threshold
    j = int(np.nonzero(f1 == best)[0][0])
    return float(s[first[j]]), float(best)


def select_threshold(scores, labels, level: str = "") -> float:
    labels = np.asarray(labels).ravel().astype(bool)
    if labels.all() or not labels.any():
        thr = float(np.percentile(np.asarray(scores, dtype=np.float64), FALLBACK_PERCENTILE))
        log.warning("single-class validation at %s level; falling back to the %.1fth percentile (%.6g)",
                    level or "?", FALLBACK_PERCENTILE, thr)
        return thr
    return best_f1_threshold(scores, labels)[0]


def select_thresholds(val_results, val_samples) -> tuple[float, float]:
    px_scores, px_labels = pool_pixels(val_results, val_samples)
    pixel_thr = select_threshold(px_scores, px_labels, "pixel")
    image_thr = select_threshold([r.image_score for r in val_results], [s.label for s in val_samples], "image")
    return pixel_thr, image_thr


def threshold_at_sensitivity(scores, labels, target_sen: float) -> float:
    """Largest observed threshold whose ``score > thr`` sensitivity reaches ``target_sen``."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    pos = np.sort(scores[labels])[::-1]
    k = int(math.ceil(target_sen * pos.size))
    k = min(max(k, 1), pos.size)
    # need at least k positives strictly above thr: take just below the k-th largest positive
    kth = pos[k - 1]
    below = scores[scores < kth]
    return float(below.max()) if below.size else float(np.nextafter(kth, -np.inf))


def score_images(inputs, recons, signed: bool = False) -> list[AnomalyResult]:
    out = []
    for inp, rec in zip(inputs, recons):
        amap = compute_anomaly_map(inp, rec, signed)
        out.append(AnomalyResult(inp.source_id, amap, image_score(amap)))
    return out
