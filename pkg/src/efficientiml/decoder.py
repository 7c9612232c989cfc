"""Multi-scale decoder head.

Each stage feature goes through ``1x1 conv -> LayerNorm -> 1x1 conv`` to give
a per-stage logit map. The normalized hidden features of all three heads are
upsampled to 1/16 scale, concatenated and passed through a fusion head whose
logits are bilinearly upsampled x16 to full resolution.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import PyramidFeatures
from .layers import GELU, LayerNorm, Linear, Module


@dataclass
class MultiScalePrediction:
    logits: tuple[np.ndarray, np.ndarray, np.ndarray]
    logits_final: np.ndarray

    @property
    def probs(self) -> tuple[np.ndarray, ...]:
        return tuple(T.sigmoid(x) for x in self.logits)

    @property
    def m1(self):
        return T.sigmoid(self.logits[0])

    @property
    def m2(self):
        return T.sigmoid(self.logits[1])

    @property
    def m3(self):
        return T.sigmoid(self.logits[2])

    @property
    def m_final(self):
        return T.sigmoid(self.logits_final)


class StageHead(Module):
    def __init__(self, c: int, width: int, rng):
        super().__init__()
        self.add_child("proj", Linear(c, width, rng))
        self.add_child("norm", LayerNorm(width))
        self.add_child("pred", Linear(width, 1, rng))

    def forward(self, x):
        h = self.norm.forward(self.proj.forward(x))
        return h, self.pred.forward(h)

    def backward(self, dh, dlogit):
        dh = dh + self.pred.backward(dlogit)
        return self.proj.backward(self.norm.backward(dh))


class FusionHead(Module):
    def __init__(self, width: int, rng):
        super().__init__()
        self.add_child("fc1", Linear(3 * width, width, rng))
        self.add_child("act", GELU())
        self.add_child("fc2", Linear(width, 1, rng))

    def forward(self, x):
        return self.fc2.forward(self.act.forward(self.fc1.forward(x)))

    def backward(self, dy):
        return self.fc1.backward(self.act.backward(self.fc2.backward(dy)))


class Decoder(Module):
    # upsampling factors from stage s to the 1/16 grid, and from there to full size
    STAGE_FACTORS = (1, 2, 4)
    FINAL_FACTOR = 16

    def __init__(self, channels, width: int, rng):
        super().__init__()
        self.width = width
        for s, c in enumerate(channels, 1):
            self.add_child(f"head{s}", StageHead(c, width, rng))
        self.add_child("fuse", FusionHead(width, rng))

    def forward(self, feats: PyramidFeatures) -> MultiScalePrediction:
        hidden, logits = [], []
        for s, f in enumerate(feats, 1):
            h, lg = getattr(self, f"head{s}").forward(f)
            hidden.append(h)
            logits.append(lg)
        up = [T.bilinear_upsample(h, fac) for h, fac in zip(hidden, self.STAGE_FACTORS)]
        fused = self.fuse.forward(np.concatenate(up, axis=-1))
        final = T.bilinear_upsample(fused, self.FINAL_FACTOR)
        return MultiScalePrediction(tuple(logits), final)

    def backward(self, dlogits, dfinal):
        """Gradients w.r.t. the per-stage and final logits -> per-stage feature gradients."""
        dfused = T.bilinear_upsample_backward(dfinal, self.FINAL_FACTOR)
        dup = self.fuse.backward(dfused)
        w = self.width
        dfeat = []
        for s, (dl, fac) in enumerate(zip(dlogits, self.STAGE_FACTORS), 1):
            dh = T.bilinear_upsample_backward(dup[..., (s - 1) * w : s * w], fac)
            dfeat.append(getattr(self, f"head{s}").backward(dh, dl))
        return dfeat
