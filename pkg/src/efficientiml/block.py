"""EfficientRWKV block: depthwise-conv residual, three-branch token mixer, FFN."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ConfigError
from .layers import DepthwiseConv2d, LayerNorm, Linear, Module, ResidualFFN
from .wkv import WkvParams, wkv_backward, wkv_scan


@dataclass(frozen=True)
class ChannelSplit:
    c_v: int
    c_con: int
    c_i: int

    @property
    def total(self) -> int:
        return self.c_v + self.c_con + self.c_i

    @classmethod
    def from_ratios(cls, c: int, ratios) -> "ChannelSplit":
        """Local and identity widths are rounded half-up; the global branch takes the rest."""
        _, r_con, r_i = ratios
        c_con = int(math.floor(c * r_con + 0.5))
        c_i = int(math.floor(c * r_i + 0.5))
        split = cls(c - c_con - c_i, c_con, c_i)
        split.check(c)
        return split

    def check(self, c: int) -> None:
        if self.total != c:
            raise ConfigError(f"split {self} does not partition {c} channels")
        if min(self.c_v, self.c_con, self.c_i) < 0 or self.c_v < 1:
            raise ConfigError(f"split {self} needs non-negative widths and c_v >= 1")


def split_channels(x, split: ChannelSplit):
    split.check(x.shape[-1])
    a, b = split.c_v, split.c_v + split.c_con
    return x[..., :a], x[..., a:b], x[..., b:]


def q_shift(x, gamma: float = 0.25):
    """Shift four channel groups by one pixel right, left, down and up.

    Works on ``(..., H, W, C)``; vacated pixels are zero and channels past the
    fourth group are passed through.
    """
    C = x.shape[-1]
    g = int(C * gamma)
    out = np.zeros_like(x)
    out[..., :, 1:, 0:g] = x[..., :, :-1, 0:g]
    out[..., :, :-1, g : 2 * g] = x[..., :, 1:, g : 2 * g]
    out[..., 1:, :, 2 * g : 3 * g] = x[..., :-1, :, 2 * g : 3 * g]
    out[..., :-1, :, 3 * g : 4 * g] = x[..., 1:, :, 3 * g : 4 * g]
    out[..., 4 * g :] = x[..., 4 * g :]
    return out


def q_shift_backward(dy, gamma: float = 0.25):
    C = dy.shape[-1]
    g = int(C * gamma)
    dx = np.zeros_like(dy)
    dx[..., :, :-1, 0:g] = dy[..., :, 1:, 0:g]
    dx[..., :, 1:, g : 2 * g] = dy[..., :, :-1, g : 2 * g]
    dx[..., :-1, :, 2 * g : 3 * g] = dy[..., 1:, :, 2 * g : 3 * g]
    dx[..., 1:, :, 3 * g : 4 * g] = dy[..., :-1, :, 3 * g : 4 * g]
    dx[..., 4 * g :] = dy[..., 4 * g :]
    return dx


class GlobalBranch(Module):
    """Q-shift, key/value/receptance maps, bidirectional WKV over all H*W tokens."""

    def __init__(self, c: int, rng):
        super().__init__()
        self.c = c
        for name in ("mix_k", "mix_v", "mix_r"):
            self.add_param(name, np.full(c, 0.5, np.float32))
        self.add_child("key", Linear(c, c, rng, bias=False))
        self.add_child("value", Linear(c, c, rng, bias=False))
        self.add_child("receptance", Linear(c, c, rng, bias=False))
        self.add_child("output", Linear(c, c, rng, bias=False))
        # effective decays spread over [1, 12]: whole-sequence attenuation e^-1 .. e^-12
        decay = np.linspace(1.0, 12.0, c) if c > 1 else np.array([4.0])
        self.add_param("w_free", np.log(np.expm1(decay)).astype(np.float32))
        self.add_param("u", np.full(c, 0.5, np.float32))

    def wkv_params(self) -> WkvParams:
        return WkvParams(self.params["w_free"], self.params["u"])

    def forward(self, x):
        p = self.params
        B, H, W, C = x.shape
        xs = q_shift(x)
        d = xs - x
        k = self.key.forward(x + p["mix_k"] * d)
        v = self.value.forward(x + p["mix_v"] * d)
        r = self.receptance.forward(x + p["mix_r"] * d)
        k2 = k.reshape(B, H * W, C)
        v2 = v.reshape(B, H * W, C)
        a = wkv_scan(k2, v2, self.wkv_params()).reshape(B, H, W, C)
        sr = T.sigmoid(r)
        self._cache = (d, k2, v2, a, sr)
        return self.output.forward(sr * a)

    def backward(self, dy):
        p = self.params
        d, k2, v2, a, sr = self._cache
        B, H, W, C = dy.shape
        dg = self.output.backward(dy)
        da = dg * sr
        dr = dg * a * sr * (1.0 - sr)
        dk, dv, dwf, du = wkv_backward(k2, v2, self.wkv_params(), da.reshape(B, H * W, C))
        self.grads["w_free"] += dwf
        self.grads["u"] += du
        dxk = self.key.backward(dk.reshape(B, H, W, C))
        dxv = self.value.backward(dv.reshape(B, H, W, C))
        dxr = self.receptance.backward(dr)
        axes = (0, 1, 2)
        self.grads["mix_k"] += (dxk * d).sum(axis=axes)
        self.grads["mix_v"] += (dxv * d).sum(axis=axes)
        self.grads["mix_r"] += (dxr * d).sum(axis=axes)
        # x enters directly with weight (1 - mix) and through the shift with weight mix
        dd = dxk * p["mix_k"] + dxv * p["mix_v"] + dxr * p["mix_r"]
        return dxk + dxv + dxr - dd + q_shift_backward(dd)


class LocalBranch(Module):
    """Depthwise KxK followed by pointwise 1x1."""

    def __init__(self, c: int, k: int, rng):
        super().__init__()
        self.add_child("dw", DepthwiseConv2d(c, k, rng))
        self.add_child("pw", Linear(c, c, rng))

    def forward(self, x):
        return self.pw.forward(self.dw.forward(x))

    def backward(self, dy):
        return self.dw.backward(self.pw.backward(dy))


class EfficientRWKVBlock(Module):
    """``x2 = x + dw(x)``; ``x3 = x2 + mixer(LN(x2))``; ``y = x3 + FFN(LN(x3))``.

    The mixer runs the global branch on the first ``c_v`` channels, the local
    branch on the next ``c_con`` and passes the last ``c_i`` through.
    """

    def __init__(self, c: int, split: ChannelSplit, k_local: int, rng,
                 dw_kernel: int = 3, ffn_ratio: int = 4):
        super().__init__()
        split.check(c)
        self.split = split
        self.add_child("dw_residual", DepthwiseConv2d(c, dw_kernel, rng, std=0.02))
        self.add_child("norm1", LayerNorm(c))
        self.add_child("global_branch", GlobalBranch(split.c_v, rng))
        if split.c_con:
            self.add_child("local_branch", LocalBranch(split.c_con, k_local, rng))
        self.add_child("ffn", ResidualFFN(c, ffn_ratio, rng))

    def forward(self, x):
        x2 = x + self.dw_residual.forward(x)
        h = self.norm1.forward(x2)
        hg, hl, hi = split_channels(h, self.split)
        parts = [self.global_branch.forward(hg)]
        if self.split.c_con:
            parts.append(self.local_branch.forward(hl))
        parts.append(hi)
        x3 = x2 + np.concatenate(parts, axis=-1)
        return self.ffn.forward(x3)

    def backward(self, dy):
        dx3 = self.ffn.backward(dy)
        dg, dl, di = split_channels(dx3, self.split)
        parts = [self.global_branch.backward(dg)]
        if self.split.c_con:
            parts.append(self.local_branch.backward(dl))
        parts.append(di)
        dx2 = dx3 + self.norm1.backward(np.concatenate(parts, axis=-1))
        return dx2 + self.dw_residual.backward(dx2)
