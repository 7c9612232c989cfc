import numpy as np
import pytest
from conftest import module_grad_error, randomize

from efficientiml.backbone import (Backbone, PatchEmbed, PatchMerge, check_input_size, depth_to_space,
                                   space_to_depth, stage_splits)
from efficientiml.config import BackboneConfig, ConfigError, ModelConfig
from efficientiml.model import EfficientIML


def test_embed_shapes(rng):
    emb = PatchEmbed((8, 16, 32, 200), rng)
    assert emb.forward(np.zeros((1, 512, 512, 3), np.float32)).shape == (1, 32, 32, 200)
    assert emb.forward(np.zeros((1, 128, 128, 3), np.float32)).shape == (1, 8, 8, 200)


def test_merge_shapes(rng):
    assert PatchMerge(200, 376, 4, rng).forward(np.zeros((1, 64, 64, 200), np.float32)).shape == (1, 32, 32, 376)
    assert PatchMerge(376, 448, 4, rng).forward(np.zeros((1, 32, 32, 376), np.float32)).shape == (1, 16, 16, 448)


def test_merge_averaging_keeps_constant(rng):
    m = PatchMerge(3, 3, 2, rng).astype(np.float64)
    m.proj.params["weight"][...] = np.tile(np.eye(3), (4, 1)) / 4
    m.proj.params["bias"][...] = 0
    m.ffn.ffn.fc2.params["weight"][...] = 0
    m.ffn.ffn.fc2.params["bias"][...] = 0
    x = np.broadcast_to(np.array([1.0, -2.0, 0.5]), (1, 4, 6, 3)).copy()
    y = m.forward(x)
    assert y.shape == (1, 2, 3, 3) and np.allclose(y, x[:, :2, :3], atol=1e-15)


def test_space_to_depth_roundtrip(rng):
    x = rng.normal(size=(2, 4, 6, 3))
    y = space_to_depth(x)
    assert y.shape == (2, 2, 3, 12)
    assert np.array_equal(y[0, 0, 0], np.concatenate([x[0, 0, 0], x[0, 1, 0], x[0, 0, 1], x[0, 1, 1]]))
    assert np.array_equal(depth_to_space(y, 3), x)


def test_input_size_error_suggests_padding():
    with pytest.raises(ConfigError, match=r"pad by \(24, 0\) to 1024x1024"):
        check_input_size(1000, 1024)


def test_default_splits_sum_to_widths():
    cfg = BackboneConfig()
    assert [s.total for s in stage_splits(cfg)] == list(cfg.channels)
    assert [(s.c_v, s.c_con, s.c_i) for s in stage_splits(cfg)] == [(160, 40, 0), (263, 75, 38), (269, 134, 45)]


@pytest.mark.parametrize("size", [128, 256])
def test_pyramid_shapes(size):
    bb = Backbone(BackboneConfig(), np.random.default_rng(0))
    f = bb.forward(np.zeros((size, size, 3), np.float32))
    s = size
    assert (f.f1.shape, f.f2.shape, f.f3.shape) == (
        (s // 16, s // 16, 200), (s // 32, s // 32, 376), (s // 64, s // 64, 448))


@pytest.mark.slow
def test_pyramid_shapes_2048():
    bb = Backbone(BackboneConfig(depths=(1, 1, 1)), np.random.default_rng(0))
    f = bb.forward(np.zeros((1, 2048, 2048, 3), np.float32))
    assert (f.f1.shape[1:], f.f2.shape[1:], f.f3.shape[1:]) == ((128, 128, 200), (64, 64, 376), (32, 32, 448))


def test_backbone_deterministic(rng):
    cfg = ModelConfig(BackboneConfig(channels=(8, 12, 16), depths=(1, 1, 1), stem_channels=(4, 4, 4)))
    img = rng.random((1, 128, 128, 3), dtype=np.float32)
    a, b = EfficientIML(cfg), EfficientIML(cfg)
    fa, fb = a.features(img), b.features(img)
    assert all(np.array_equal(x, y) for x, y in zip(fa, fb))
    assert all(np.array_equal(x, y) for x, y in zip(fa, a.features(img)))


def test_backbone_gradients(rng):
    cfg = BackboneConfig(channels=(6, 8, 10), depths=(1, 1, 1), stem_channels=(3, 3, 4))
    bb = randomize(Backbone(cfg, rng), rng, 0.3)
    bb.embed.conv0.input_grad = True
    x = rng.normal(size=(1, 64, 64, 3))

    state = {}

    def forward(img):
        feats = tuple(bb.forward(img))
        state["shapes"] = [f.shape for f in feats]
        return np.concatenate([f.ravel() for f in feats])

    class Wrap:
        _slots = bb._slots
        zero_grad = bb.zero_grad

        @staticmethod
        def backward(g):
            parts, o = [], 0
            for s in state["shapes"]:
                k = int(np.prod(s))
                parts.append(g[o:o + k].reshape(s))
                o += k
            return bb.backward(*parts)

    assert module_grad_error(Wrap, x, rng, forward=forward, n_per_param=2) <= 1e-3
