"""Dense-array primitives with hand-written backward passes.

Arrays are plain ``numpy.ndarray`` in channels-last layout: a spatial map is
``(H, W, C)`` or, batched, ``(B, H, W, C)``. Every function is pure and keeps
the dtype of its inputs (float32 for compute, float64 for verification).
"""
from __future__ import annotations

import math

import numpy as np

__all__ = [
    "ShapeError",
    "matmul",
    "add",
    "mul",
    "sigmoid",
    "exp",
    "softplus",
    "gelu",
    "gelu_backward",
    "layer_norm",
    "layer_norm_backward",
    "depthwise_conv2d",
    "depthwise_conv2d_backward",
    "conv2d",
    "conv2d_backward",
    "bilinear_matrix",
    "bilinear_upsample",
    "bilinear_upsample_backward",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product over the last axis of ``a`` and first axis of ``b``."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    # only equal shapes, scalars, or a trailing-axis match are allowed
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    small, big = (b, a) if a.ndim >= b.ndim else (a, b)
    if small.ndim and big.shape[-small.ndim:] == small.shape:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable")


def add(a, b):
    a, b = np.asarray(a), np.asarray(b)
    _check_broadcast(a, b, "add")
    return a + b


def mul(a, b):
    a, b = np.asarray(a), np.asarray(b)
    _check_broadcast(a, b, "mul")
    return a * b


def sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def exp(x):
    return np.exp(x)


def softplus(x):
    x = np.asarray(x)
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x, return_tanh: bool = False):
    """GELU, tanh approximation. With ``return_tanh`` also returns the tanh
    term so the backward pass can reuse it."""
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x * x))
    y = 0.5 * x * (1.0 + th)
    return (y, th) if return_tanh else y


def gelu_backward(x, dy, th=None):
    x2 = x * x
    if th is None:
        th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
    return dy * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner)


def layer_norm(x, gamma, beta, eps: float = 1e-5):
    """Normalize over the last axis. Returns ``(y, cache)``."""
    if eps <= 0:
        raise ValueError(f"layer_norm: eps must be positive, got {eps}")
    x = np.asarray(x)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match {x.shape}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, (xhat, rstd, gamma)


def layer_norm_backward(dy, cache):
    """Returns ``(dx, dgamma, dbeta)``."""
    xhat, rstd, gamma = cache
    axes = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * gamma
    c = xhat.shape[-1]
    dx = rstd / c * (
        c * dxhat
        - dxhat.sum(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


def _as_batched(x):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected (H, W, C) or (B, H, W, C), got {x.shape}")


def _check_kernel(k: int, stride: int) -> None:
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")


def depthwise_conv2d(x, kernels, stride: int = 1, bias=None):
    """Per-channel KxK convolution with same padding.

    ``kernels`` has shape ``(K, K, C)``; output extent is ``ceil(H / stride)``.
    """
    xb, squeeze = _as_batched(x)
    K = kernels.shape[0]
    _check_kernel(K, stride)
    if kernels.shape != (K, K, xb.shape[-1]):
        raise ShapeError(f"depthwise_conv2d: kernel {kernels.shape} vs input {xb.shape}")
    B, H, W, C = xb.shape
    p = K // 2
    Ho, Wo = -(-H // stride), -(-W // stride)
    xp = np.pad(xb, ((0, 0), (p, p), (p, p), (0, 0)))
    out = np.zeros((B, Ho, Wo, C), dtype=np.result_type(xb, kernels))
    for i in range(K):
        for j in range(K):
            out += xp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride] * kernels[i, j]
    if bias is not None:
        out += bias
    return out[0] if squeeze else out


def depthwise_conv2d_backward(x, kernels, dy, stride: int = 1):
    """Returns ``(dx, dkernels, dbias)``."""
    xb, squeeze = _as_batched(x)
    dyb, _ = _as_batched(dy)
    K = kernels.shape[0]
    B, H, W, C = xb.shape
    p = K // 2
    Ho, Wo = dyb.shape[1:3]
    xp = np.pad(xb, ((0, 0), (p, p), (p, p), (0, 0)))
    dxp = np.zeros_like(xp)
    dk = np.zeros_like(kernels)
    for i in range(K):
        for j in range(K):
            win = (slice(None), slice(i, i + stride * Ho, stride), slice(j, j + stride * Wo, stride))
            dk[i, j] = (xp[win] * dyb).sum(axis=(0, 1, 2))
            dxp[win] += dyb * kernels[i, j]
    dx = dxp[:, p : p + H, p : p + W]
    db = dyb.sum(axis=(0, 1, 2))
    return (dx[0] if squeeze else dx), dk, db


def _im2col(xp, K, stride, Ho, Wo):
    B, _, _, C = xp.shape
    cols = np.empty((B, Ho, Wo, K, K, C), dtype=xp.dtype)
    for i in range(K):
        for j in range(K):
            cols[:, :, :, i, j] = xp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
    return cols.reshape(B, Ho, Wo, K * K * C)


def conv2d(x, weight, bias=None, stride: int = 1):
    """Dense KxK convolution, same padding. ``weight`` is ``(K, K, C_in, C_out)``."""
    xb, squeeze = _as_batched(x)
    K = weight.shape[0]
    _check_kernel(K, stride)
    if weight.shape[:3] != (K, K, xb.shape[-1]):
        raise ShapeError(f"conv2d: weight {weight.shape} vs input {xb.shape}")
    B, H, W, _ = xb.shape
    p = K // 2
    Ho, Wo = -(-H // stride), -(-W // stride)
    xp = np.pad(xb, ((0, 0), (p, p), (p, p), (0, 0)))
    cols = _im2col(xp, K, stride, Ho, Wo)
    out = cols @ weight.reshape(-1, weight.shape[-1])
    if bias is not None:
        out += bias
    return out[0] if squeeze else out


def conv2d_backward(x, weight, dy, stride: int = 1, need_dx: bool = True):
    """Returns ``(dx, dweight, dbias)``; ``dx`` is None when ``need_dx`` is False."""
    xb, squeeze = _as_batched(x)
    dyb, _ = _as_batched(dy)
    K, _, C, Cout = weight.shape
    B, H, W, _ = xb.shape
    p = K // 2
    Ho, Wo = dyb.shape[1:3]
    xp = np.pad(xb, ((0, 0), (p, p), (p, p), (0, 0)))
    cols = _im2col(xp, K, stride, Ho, Wo)
    dy2 = dyb.reshape(-1, Cout)
    dw = (cols.reshape(-1, K * K * C).T @ dy2).reshape(weight.shape)
    db = dy2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (dy2 @ weight.reshape(-1, Cout).T).reshape(B, Ho, Wo, K, K, C)
    dxp = np.zeros_like(xp)
    for i in range(K):
        for j in range(K):
            dxp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[:, :, :, i, j]
    dx = dxp[:, p : p + H, p : p + W]
    return (dx[0] if squeeze else dx), dw, db


def bilinear_matrix(n_in: int, factor: int, dtype=np.float64) -> np.ndarray:
    """``(n_in * factor, n_in)`` interpolation matrix, half-pixel centers, edge clamp."""
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def bilinear_upsample(x, factor: int):
    """Upsample ``(..., H, W, C)`` spatially by an integer factor."""
    if factor == 1:
        return np.array(x, copy=True)
    x = np.asarray(x)
    H, W = x.shape[-3], x.shape[-2]
    mh = bilinear_matrix(H, factor, x.dtype)
    mw = bilinear_matrix(W, factor, x.dtype)
    return np.einsum("ph,...hwc,qw->...pqc", mh, x, mw, optimize=True)


def bilinear_upsample_backward(dy, factor: int):
    if factor == 1:
        return np.array(dy, copy=True)
    H, W = dy.shape[-3] // factor, dy.shape[-2] // factor
    mh = bilinear_matrix(H, factor, dy.dtype)
    mw = bilinear_matrix(W, factor, dy.dtype)
    return np.einsum("ph,...pqc,qw->...hwc", mh, dy, mw, optimize=True)
