"""Bidirectional WKV global attention.

For every channel independently::

    wkv_t = (sum_{i != t} e^{-(|t-i|-1) w / T + k_i} v_i + e^{u + k_t} v_t)
            / (sum_{i != t} e^{-(|t-i|-1) w / T + k_i} + e^{u + k_t})

``wkv_naive`` evaluates this directly in O(T^2); ``wkv_scan`` uses one
left-to-right and one right-to-left recurrence for O(T C). The scan and its
backward pass come from the compiled ``_scan`` extension when it is built and
otherwise from the numpy fallback; ``BACKEND`` names the one in use and
``EFFICIENTIML_WKV_BACKEND=numpy`` forces the fallback.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from ..tensor import ShapeError, sigmoid, softplus
from . import _reference

try:
    from . import _scan as _compiled
except ImportError:  # extension not built
    _compiled = None

__all__ = [
    "BACKEND",
    "NumericInputError",
    "WkvParams",
    "available_backends",
    "wkv_naive",
    "wkv_scan",
    "wkv_backward",
    "scan_step_count",
]


class NumericInputError(ValueError):
    """Raised when WKV inputs contain NaN or Inf."""


def available_backends() -> list[str]:
    return (["compiled"] if _compiled is not None else []) + ["numpy"]


def _default_backend() -> str:
    forced = os.environ.get("EFFICIENTIML_WKV_BACKEND", "").strip().lower()
    if forced in ("numpy", "python", "fallback"):
        return "numpy"
    return "compiled" if _compiled is not None else "numpy"


BACKEND = _default_backend()


@dataclass
class WkvParams:
    """Per-channel decay and self-bonus. ``w_free`` is the unconstrained decay."""

    w_free: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        self.w_free = np.asarray(self.w_free, dtype=np.float64)
        self.u = np.asarray(self.u, dtype=np.float64)
        if self.w_free.shape != self.u.shape or self.w_free.ndim != 1:
            raise ShapeError(f"WkvParams: w_free {self.w_free.shape} vs u {self.u.shape}")
        if not (np.isfinite(self.w_free).all() and np.isfinite(self.u).all()):
            raise NumericInputError("WkvParams: non-finite decay or bias")

    @property
    def w(self) -> np.ndarray:
        return softplus(self.w_free)

    @classmethod
    def from_decay(cls, w, u) -> "WkvParams":
        """Build from an effective (non-negative) decay by inverting softplus."""
        w = np.asarray(w, dtype=np.float64)
        if (w < 0).any():
            raise ValueError("effective decay must be non-negative")
        with np.errstate(divide="ignore"):
            w_free = np.where(w > 30, w, np.log(np.expm1(np.maximum(w, 1e-300))))
        return cls(w_free, u)


def _prepare(k, v, p: WkvParams):
    k = np.asarray(k)
    v = np.asarray(v)
    if k.shape != v.shape or k.ndim not in (2, 3):
        raise ShapeError(f"wkv: k {k.shape} and v {v.shape} must match as (T, C) or (N, T, C)")
    if k.shape[-2] < 1:
        raise ShapeError("wkv: need at least one token")
    if k.shape[-1] != p.u.shape[0]:
        raise ShapeError(f"wkv: {k.shape[-1]} channels but params have {p.u.shape[0]}")
    if not (np.isfinite(k).all() and np.isfinite(v).all()):
        raise NumericInputError("wkv: non-finite key or value")
    squeeze = k.ndim == 2
    if squeeze:
        k, v = k[None], v[None]
    return k, v, squeeze


def wkv_naive(k, v, p: WkvParams) -> np.ndarray:
    """Quadratic reference evaluation, computed in the inputs' own precision."""
    k, v, squeeze = _prepare(k, v, p)
    dt = np.result_type(k, v)
    out = _reference.naive_forward(
        k.astype(dt), v.astype(dt), p.w.astype(dt), p.u.astype(dt)
    )
    return out[0] if squeeze else out


def wkv_scan(k, v, p: WkvParams, backend: str | None = None, stats: dict | None = None):
    """Linear-time WKV. Computes in float64 and returns the inputs' dtype.

    ``stats``, when given, forces the numpy path and receives the number of
    per-channel recurrence steps under ``"steps"``.
    """
    k, v, squeeze = _prepare(k, v, p)
    dt = np.result_type(k, v)
    k64 = np.ascontiguousarray(k, dtype=np.float64)
    v64 = np.ascontiguousarray(v, dtype=np.float64)
    backend = backend or BACKEND
    if stats is not None:
        stats.setdefault("steps", 0)
        out = _reference.scan_forward(k64, v64, p.w, p.u, stats=stats)
    elif backend == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled WKV backend is not built")
        out = _compiled.forward(k64, v64, p.w, p.u)
    else:
        out = _reference.scan_forward(k64, v64, p.w, p.u)
    out = out.astype(dt, copy=False)
    return out[0] if squeeze else out


def wkv_backward(k, v, p: WkvParams, grad_out, backend: str | None = None):
    """Gradients of ``sum(grad_out * wkv(k, v))``.

    Returns ``(grad_k, grad_v, grad_w_free, grad_u)``; the decay gradient is
    taken through the softplus, i.e. w.r.t. ``p.w_free``.
    """
    k, v, squeeze = _prepare(k, v, p)
    g = np.asarray(grad_out)
    if g.shape != (k.shape[1:] if squeeze else k.shape):
        raise ShapeError(f"wkv_backward: grad_out {g.shape} vs forward {k.shape}")
    if squeeze:
        g = g[None]
    dt = np.result_type(k, v)
    args = [np.ascontiguousarray(a, dtype=np.float64) for a in (k, v)]
    w, u = p.w, p.u
    g64 = np.ascontiguousarray(g, dtype=np.float64)
    backend = backend or BACKEND
    if backend == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled WKV backend is not built")
        dk, dv, dw, du = _compiled.backward(*args, w, u, g64)
    else:
        dk, dv, dw, du = _reference.scan_backward(*args, w, u, g64)
    dw_free = dw * sigmoid(p.w_free)
    if squeeze:
        dk, dv = dk[0], dv[0]
    return dk.astype(dt, copy=False), dv.astype(dt, copy=False), dw_free, du


def scan_step_count(T: int, C: int = 1) -> int:
    """Recurrence steps executed by the scan for one sequence (measured)."""
    stats = {"steps": 0}
    z = np.zeros((1, T, C))
    wkv_scan(z, z, WkvParams(np.zeros(C), np.zeros(C)), stats=stats)
    return stats["steps"]
