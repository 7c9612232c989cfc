"""Full EfficientIML network: backbone + multi-scale decoder."""
from __future__ import annotations

import numpy as np

from .backbone import Backbone, PyramidFeatures, normalize_image
from .config import ModelConfig
from .decoder import Decoder, MultiScalePrediction
from .layers import Module


class EfficientIML(Module):
    def __init__(self, cfg: ModelConfig | None = None, dtype=np.float32):
        super().__init__()
        cfg = cfg or ModelConfig()
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.add_child("backbone", Backbone(cfg.backbone, rng))
        self.add_child("decoder", Decoder(cfg.backbone.channels, cfg.head_width, rng))
        self.astype(dtype)

    def features(self, images) -> PyramidFeatures:
        """``images``: ``(B, H, W, 3)`` in [0, 1]."""
        x = normalize_image(np.asarray(images)).astype(self.dtype, copy=False)
        return self.backbone.forward(x)

    def forward(self, images) -> MultiScalePrediction:
        return self.decoder.forward(self.features(images))

    def backward(self, grad_logits, grad_final) -> None:
        """Accumulate parameter gradients from logit gradients of the last forward."""
        d1, d2, d3 = self.decoder.backward(grad_logits, grad_final)
        self.backbone.backward(d1, d2, d3)

    def predict_proba(self, images) -> np.ndarray:
        return self.forward(images).m_final
