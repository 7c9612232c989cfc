"""Multi-scale, edge-aware BCE objective.

    total = sum_i lambda_i * BCE(m_i, M_i) + lambda_edge * sum_i BCE(m_i, M_i; E_i)
            + lambda_final * BCE(m_final, M) + lambda_edge * BCE(m_final, M; E)

``BCE(.; E)`` averages only over pixels inside the edge band ``E`` and is zero
when the band is empty. All losses are computed from logits.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import LossWeights
from .decoder import MultiScalePrediction
from .tensor import sigmoid

TERM_NAMES = (
    "bce_1", "bce_2", "bce_3", "edge_1", "edge_2", "edge_3", "bce_final", "edge_final",
)
# stage i predictions live at 1/16, 1/32, 1/64 of the input
STAGE_STRIDES = (16, 32, 64)


class MaskError(ValueError):
    """Target mask is not binary or has the wrong shape."""


def _check_binary(m, what="mask"):
    m = np.asarray(m)
    if not np.isin(m, (0, 1)).all():
        raise MaskError(f"{what} must contain only 0 and 1")
    return m


def downsample_mask(m, factor: int) -> np.ndarray:
    """Area-majority downsampling over the two axes before the last: a cell is 1
    when at least half of its ``factor x factor`` pixels are 1."""
    m = np.asarray(m)
    if factor == 1:
        return m.copy()
    *lead, H, W, C = m.shape
    if H % factor or W % factor:
        raise MaskError(f"mask {H}x{W} not divisible by {factor}")
    blocks = m.reshape(*lead, H // factor, factor, W // factor, factor, C)
    frac = blocks.mean(axis=(-4, -2))
    return (frac >= 0.5).astype(m.dtype)


def _box_filter(m, radius, reduce):
    # separable square structuring element, replicate border
    H, W = m.shape[-3], m.shape[-2]
    pad = [(0, 0)] * m.ndim
    pad[-3] = (radius, radius)
    pad[-2] = (radius, radius)
    p = np.pad(m, pad, mode="edge")
    rows = p[..., 0:H, :, :]
    for d in range(1, 2 * radius + 1):
        rows = reduce(rows, p[..., d : d + H, :, :])
    out = rows[..., :, 0:W, :]
    for d in range(1, 2 * radius + 1):
        out = reduce(out, rows[..., :, d : d + W, :])
    return out


def dilate(m, radius: int):
    return _box_filter(m, radius, np.maximum)


def erode(m, radius: int):
    return _box_filter(m, radius, np.minimum)


def make_edge_mask(m, radius: int) -> np.ndarray:
    """Boundary band ``dilate(m, r) XOR erode(m, r)`` with a (2r+1)^2 square
    element. Accepts ``(..., H, W, 1)`` or ``(H, W)``."""
    if radius < 1:
        raise ValueError(f"edge radius must be >= 1, got {radius}")
    m = _check_binary(m)
    flat = m.ndim == 2
    mm = m[..., None] if flat else m
    e = (dilate(mm, radius) != erode(mm, radius)).astype(m.dtype)
    return e[..., 0] if flat else e


def edge_radius_at(level: int, full_radius: int) -> int:
    """Band radius at pyramid level ``level`` (0 = full resolution): halved per level, min 1."""
    return max(1, full_radius >> level)


def _elementwise_bce(logits, target):
    x = logits
    return np.maximum(x, 0) - x * target + np.log1p(np.exp(-np.abs(x)))


def bce(logits, target, pixel_weights=None) -> float:
    """Mean BCE from logits; with ``pixel_weights`` (0/1) the mean runs over
    selected pixels only and is 0 if none are selected."""
    return bce_with_grad(logits, target, pixel_weights)[0]


def bce_with_grad(logits, target, pixel_weights=None):
    logits = np.asarray(logits)
    target = _check_binary(target, "target")
    if logits.shape != target.shape:
        raise MaskError(f"bce: logits {logits.shape} vs target {target.shape}")
    x = logits.astype(np.float64)
    y = target.astype(np.float64)
    per = _elementwise_bce(x, y)
    sig = sigmoid(x)
    if pixel_weights is None:
        n = per.size
        loss = float(per.sum() / n)
        grad = (sig - y) / n
    else:
        sel = np.asarray(pixel_weights).astype(np.float64)
        if sel.shape != x.shape:
            raise MaskError(f"bce: weights {sel.shape} vs logits {x.shape}")
        n = sel.sum()
        if n == 0:
            return 0.0, np.zeros_like(logits)
        loss = float((per * sel).sum() / n)
        grad = (sig - y) * sel / n
    return loss, grad.astype(logits.dtype)


@dataclass
class LossResult:
    total: float
    terms: dict[str, float]
    grad_logits: tuple[np.ndarray, np.ndarray, np.ndarray]
    grad_final: np.ndarray

    def log_record(self) -> str:
        return " ".join(f"{k}={v:.6g}" for k, v in self.terms.items())


def pyramid_targets(gt, radius: int, valid=None):
    """Downsampled targets, edge bands and validity masks for the three stages
    plus full resolution (index 3)."""
    gt = _check_binary(gt)
    targets, edges, valids = [], [], []
    for level, stride in enumerate(STAGE_STRIDES, 1):
        t = downsample_mask(gt, stride)
        targets.append(t)
        edges.append(make_edge_mask(t, edge_radius_at(level, radius)))
        valids.append(None if valid is None else downsample_mask(valid, stride))
    targets.append(gt)
    edges.append(make_edge_mask(gt, radius))
    valids.append(valid)
    return targets, edges, valids


def _and(a, b):
    return a if b is None else a * b


def total_loss(pred: MultiScalePrediction, gt, weights: LossWeights | None = None,
               edge_radius: int | None = None, valid=None) -> LossResult:
    """Weighted total plus the eight individual terms and logit gradients.

    ``gt`` is the full-resolution binary mask ``(..., H, W, 1)``; ``valid``
    optionally marks pixels that count (zero on padding).
    """
    weights = weights or LossWeights()
    radius = weights.edge_radius if edge_radius is None else edge_radius
    targets, edges, valids = pyramid_targets(gt, radius, valid)
    logits = (*pred.logits, pred.logits_final)
    scale_w = (*weights.per_scale, weights.lambda_final)
    terms, grads = {}, []
    total = 0.0
    for i, (lg, t, e, vm, lam) in enumerate(zip(logits, targets, edges, valids, scale_w)):
        name = f"{i + 1}" if i < 3 else "final"
        b, gb = bce_with_grad(lg, t, vm)
        eb, ge = bce_with_grad(lg, t, _and(e, vm))
        terms[f"bce_{name}"] = b
        terms[f"edge_{name}"] = eb
        total += lam * b + weights.lambda_edge * eb
        grads.append(lam * gb + weights.lambda_edge * ge)
    ordered = {k: terms[k] for k in TERM_NAMES}
    return LossResult(total, ordered, tuple(grads[:3]), grads[3])
