"""Pixel-level localization metrics: F1, IoU, accuracy and AUC."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class UndefinedMetricError(ValueError):
    """The metric is undefined for this input (e.g. AUC with a single class)."""


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


def confusion(pred_prob, gt, threshold: float = 0.5) -> ConfusionCounts:
    """Binarize ``pred_prob >= threshold`` and count against binary ``gt``."""
    pred_prob = np.asarray(pred_prob)
    gt = np.asarray(gt)
    if pred_prob.shape != gt.shape:
        raise ValueError(f"confusion: prediction {pred_prob.shape} vs ground truth {gt.shape}")
    if not np.isin(gt, (0, 1)).all():
        raise ValueError("confusion: ground truth must be binary")
    p = pred_prob >= threshold
    g = gt.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, int(g.size) - tp - fp - fn)


def f1(c: ConfusionCounts) -> float:
    denom = 2 * c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else 2 * c.tp / denom


def iou(c: ConfusionCounts) -> float:
    denom = c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else c.tp / denom


def accuracy(c: ConfusionCounts) -> float:
    return (c.tp + c.tn) / c.total if c.total else 1.0


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(s+ > s-) + 0.5 P(s+ == s-), via average ranks."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"auc: {s.shape[0]} scores vs {y.shape[0]} labels")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("auc needs at least one positive and one negative")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    # average 1-based rank over each run of ties
    _, first, counts = np.unique(sorted_s, return_index=True, return_counts=True)
    avg = first + (counts + 1) / 2.0
    ranks = np.empty_like(s)
    ranks[order] = np.repeat(avg, counts)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_pairwise(scores, labels) -> float:
    """O(P*N) enumeration of all positive/negative pairs."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    pos, neg = s[y], s[~y]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("auc needs at least one positive and one negative")
    wins = 0.0
    for p in pos:
        wins += np.count_nonzero(p > neg) + 0.5 * np.count_nonzero(p == neg)
    return float(wins / (pos.size * neg.size))


def subsample_pixels(scores, labels, max_pixels: int, seed: int = 0):
    s = np.asarray(scores).ravel()
    y = np.asarray(labels).ravel()
    if s.size <= max_pixels:
        return s, y
    idx = np.random.default_rng(seed).choice(s.size, size=max_pixels, replace=False)
    return s[idx], y[idx]


class MetricAccumulator:
    """Per-image metrics averaged over a dataset, plus pooled totals."""

    def __init__(self, threshold: float = 0.5, auc_max_pixels: int = 1 << 20, seed: int = 0):
        self.threshold = threshold
        self.auc_max_pixels = auc_max_pixels
        self.seed = seed
        self.records: list[dict] = []
        self.pooled = ConfusionCounts(0, 0, 0, 0)
        self._pool_scores: list[np.ndarray] = []
        self._pool_labels: list[np.ndarray] = []

    def add(self, image_id: str, prob, gt) -> dict:
        c = confusion(prob, gt, self.threshold)
        self.pooled = self.pooled + c
        rec = {"id": image_id, "f1": f1(c), "iou": iou(c), "acc": accuracy(c),
               "tp": c.tp, "fp": c.fp, "fn": c.fn, "tn": c.tn}
        s, y = subsample_pixels(prob, gt, self.auc_max_pixels, self.seed)
        try:
            rec["auc"] = auc(s, y)
        except UndefinedMetricError:
            rec["auc"] = None
        self.records.append(rec)
        self._pool_scores.append(s)
        self._pool_labels.append(y)
        return rec

    def summary(self) -> dict:
        n = len(self.records)
        if n == 0:
            raise UndefinedMetricError("no images evaluated")
        aucs = [r["auc"] for r in self.records if r["auc"] is not None]
        out = {
            "n_images": n,
            "f1": float(np.mean([r["f1"] for r in self.records])),
            "iou": float(np.mean([r["iou"] for r in self.records])),
            "acc": float(np.mean([r["acc"] for r in self.records])),
            "auc": float(np.mean(aucs)) if aucs else None,
            "pooled_f1": f1(self.pooled),
            "pooled_iou": iou(self.pooled),
            "pooled_acc": accuracy(self.pooled),
        }
        try:
            out["pooled_auc"] = auc(np.concatenate(self._pool_scores), np.concatenate(self._pool_labels))
        except UndefinedMetricError:
            out["pooled_auc"] = None
        return out
