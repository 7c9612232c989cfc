"""Three-stage EfficientRWKV backbone.

Input ``(B, H, W, 3)`` -> stem to ``H/16`` -> stage 1 -> merge -> stage 2 ->
merge -> stage 3, returning all three stage outputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .block import ChannelSplit, EfficientRWKVBlock
from .config import BackboneConfig, ConfigError
from .layers import GELU, Conv2d, LayerNorm, Linear, Module, ResidualFFN

# per-channel standardization applied after scaling pixels to [0, 1]
PIXEL_MEAN = np.array([0.485, 0.456, 0.406], np.float32)
PIXEL_STD = np.array([0.229, 0.224, 0.225], np.float32)


def check_input_size(h: int, w: int) -> None:
    if h % 64 or w % 64 or h < 64 or w < 64:
        ph, pw = -h % 64, -w % 64
        raise ConfigError(
            f"input {h}x{w} is not divisible by 64; pad by ({ph}, {pw}) to {h + ph}x{w + pw}"
        )


@dataclass
class PyramidFeatures:
    f1: np.ndarray
    f2: np.ndarray
    f3: np.ndarray

    def __iter__(self):
        return iter((self.f1, self.f2, self.f3))


def stage_splits(cfg: BackboneConfig) -> list[ChannelSplit]:
    return [ChannelSplit.from_ratios(c, r) for c, r in zip(cfg.channels, cfg.split_ratios)]


class PatchEmbed(Module):
    """Four stride-2 3x3 convolutions, each followed by LayerNorm and GELU."""

    def __init__(self, widths: tuple[int, ...], rng):
        super().__init__()
        self.n = len(widths)
        c_in = 3
        for i, c in enumerate(widths):
            self.add_child(f"conv{i}", Conv2d(c_in, c, 3, rng, stride=2))
            self.add_child(f"norm{i}", LayerNorm(c))
            self.add_child(f"act{i}", GELU())
            c_in = c
        self.conv0.input_grad = False  # no gradient needed w.r.t. pixels

    def forward(self, x):
        for i in range(self.n):
            x = getattr(self, f"act{i}").forward(
                getattr(self, f"norm{i}").forward(getattr(self, f"conv{i}").forward(x))
            )
        return x

    def backward(self, dy):
        for i in reversed(range(self.n)):
            dy = getattr(self, f"norm{i}").backward(getattr(self, f"act{i}").backward(dy))
            dy = getattr(self, f"conv{i}").backward(dy)
        return dy


def space_to_depth(x):
    """2x2 neighborhood concatenation: ``(B, h, w, C) -> (B, h/2, w/2, 4C)``."""
    B, h, w, C = x.shape
    if h % 2 or w % 2:
        raise ConfigError(f"patch merge needs even extents, got {h}x{w}")
    x = x.reshape(B, h // 2, 2, w // 2, 2, C)
    # order: (0,0), (1,0), (0,1), (1,1)
    return x.transpose(0, 1, 3, 4, 2, 5).reshape(B, h // 2, w // 2, 4 * C)


def depth_to_space(dy, C: int):
    B, h2, w2, _ = dy.shape
    d = dy.reshape(B, h2, w2, 2, 2, C).transpose(0, 1, 4, 2, 3, 5)
    return d.reshape(B, 2 * h2, 2 * w2, C)


class PatchMerge(Module):
    """2x2 concatenation, linear projection to ``c_out``, then one residual FFN."""

    def __init__(self, c_in: int, c_out: int, ffn_ratio: int, rng):
        super().__init__()
        self.c_in = c_in
        self.add_child("proj", Linear(4 * c_in, c_out, rng))
        self.add_child("ffn", ResidualFFN(c_out, ffn_ratio, rng))

    def forward(self, x):
        return self.ffn.forward(self.proj.forward(space_to_depth(x)))

    def backward(self, dy):
        return depth_to_space(self.proj.backward(self.ffn.backward(dy)), self.c_in)


class Stage(Module):
    def __init__(self, c: int, depth: int, split: ChannelSplit, k_local: int, cfg: BackboneConfig, rng):
        super().__init__()
        self.depth = depth
        for b in range(depth):
            self.add_child(
                f"block{b}",
                EfficientRWKVBlock(c, split, k_local, rng, cfg.dw_kernel, cfg.ffn_ratio),
            )

    def forward(self, x):
        for b in range(self.depth):
            x = getattr(self, f"block{b}").forward(x)
        return x

    def backward(self, dy):
        for b in reversed(range(self.depth)):
            dy = getattr(self, f"block{b}").backward(dy)
        return dy


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        c1, c2, c3 = cfg.channels
        splits = stage_splits(cfg)
        self.add_child("embed", PatchEmbed((*cfg.stem_channels, c1), rng))
        self.add_child("stage1", Stage(c1, cfg.depths[0], splits[0], cfg.local_kernels[0], cfg, rng))
        self.add_child("merge1", PatchMerge(c1, c2, cfg.ffn_ratio, rng))
        self.add_child("stage2", Stage(c2, cfg.depths[1], splits[1], cfg.local_kernels[1], cfg, rng))
        self.add_child("merge2", PatchMerge(c2, c3, cfg.ffn_ratio, rng))
        self.add_child("stage3", Stage(c3, cfg.depths[2], splits[2], cfg.local_kernels[2], cfg, rng))

    def forward(self, img) -> PyramidFeatures:
        check_input_size(img.shape[-3], img.shape[-2])
        squeeze = img.ndim == 3
        x = img[None] if squeeze else img
        f1 = self.stage1.forward(self.embed.forward(x))
        f2 = self.stage2.forward(self.merge1.forward(f1))
        f3 = self.stage3.forward(self.merge2.forward(f2))
        if squeeze:
            return PyramidFeatures(f1[0], f2[0], f3[0])
        return PyramidFeatures(f1, f2, f3)

    def backward(self, d1, d2, d3):
        """Gradients w.r.t. the three stage outputs; returns d(img)."""
        d2 = d2 + self.merge2.backward(self.stage3.backward(d3))
        d1 = d1 + self.merge1.backward(self.stage2.backward(d2))
        return self.embed.backward(self.stage1.backward(d1))


def normalize_image(img: np.ndarray) -> np.ndarray:
    """[0, 1] RGB -> standardized network input."""
    return (img - PIXEL_MEAN) / PIXEL_STD
