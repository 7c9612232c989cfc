import numpy as np
import pytest

from efficientiml.metrics import (MetricAccumulator, UndefinedMetricError, accuracy, auc, auc_pairwise,
                                  confusion, f1, iou)


def test_confusion_cases():
    c = confusion(np.array([1.0, 0, 1, 0]), np.array([1, 1, 0, 0]))
    assert (c.tp, c.fp, c.fn, c.tn) == (1, 1, 1, 1)
    gt = np.array([0, 1, 1, 0])
    c = confusion(gt.astype(float), gt)
    assert c.fp == c.fn == 0
    c = confusion(np.full(4, 0.5), gt)
    assert c.tp + c.fp == 4  # ties at the threshold count as positive


def test_metric_hand_cases():
    c = confusion(np.array([1.0, 0, 1, 0]), np.array([1, 1, 0, 0]))
    assert (f1(c), iou(c), accuracy(c)) == (0.5, 1 / 3, 0.5)
    gt = np.array([0, 1, 1, 0])
    c = confusion(gt.astype(float), gt)
    assert f1(c) == iou(c) == accuracy(c) == 1.0
    c = confusion(np.array([1.0, 1, 0, 0]), np.array([0, 0, 1, 1]))
    assert f1(c) == iou(c) == 0.0


def test_empty_masks_score_one():
    c = confusion(np.zeros(5), np.zeros(5))
    assert f1(c) == iou(c) == 1.0


def test_dice_jaccard_identity(rng):
    for _ in range(1000):
        n = int(rng.integers(1, 200))
        c = confusion(rng.random(n), (rng.random(n) < rng.random()).astype(int))
        F, J = f1(c), iou(c)
        assert abs(F - 2 * J / (1 + J)) <= 1e-9


def test_auc_examples():
    assert auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0
    assert auc([0.9, 0.4, 0.35, 0.8], [1, 0, 1, 0]) == 0.5
    assert auc([0.3] * 6, [1, 0, 1, 0, 0, 1]) == 0.5
    with pytest.raises(UndefinedMetricError):
        auc([0.1, 0.2], [1, 1])


def test_auc_matches_pair_enumeration(rng):
    for _ in range(100):
        n = int(rng.integers(2, 40))
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        s = rng.integers(0, 6, n) / 5.0  # coarse grid forces ties
        assert auc(s, y) == auc_pairwise(s, y)


def test_accumulator_summary(rng):
    acc = MetricAccumulator()
    gt = np.zeros((8, 8, 1))
    gt[2:5, 2:5] = 1
    acc.add("a", gt.copy(), gt)
    acc.add("b", np.zeros_like(gt), gt)
    s = acc.summary()
    assert s["n_images"] == 2
    assert s["f1"] == 0.5 and s["iou"] == 0.5
    assert s["auc"] == pytest.approx(0.75)
    assert s["pooled_f1"] == pytest.approx(2 * 9 / (2 * 9 + 9))
    with pytest.raises(UndefinedMetricError):
        MetricAccumulator().summary()


def test_shape_mismatch():
    with pytest.raises(ValueError):
        confusion(np.zeros(3), np.zeros(4))
