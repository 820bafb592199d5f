"""Confusion-matrix bookkeeping against a pixel-counting reference."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from rethseg.metrics import (
    ConfusionMatrix,
    dice,
    miou,
    miou_of,
    per_class_dice,
    per_class_iou,
    pixel_acc,
)


def _random_pair(rng, k, with_ignored=True):
    h, w = int(rng.integers(1, 9)), int(rng.integers(1, 9))
    truth = rng.integers(0, k, (h, w))
    if with_ignored and rng.random() < 0.5:
        truth[rng.random((h, w)) < 0.2] = 255
    pred = rng.integers(0, k, (h, w))
    return pred, truth


def test_accumulate_matches_pixel_enumeration():
    rng = np.random.default_rng(61)
    for _ in range(40):
        k = int(rng.integers(2, 7))
        cm = ConfusionMatrix(k)
        ref = np.zeros((k, k), dtype=np.int64)
        for _ in range(int(rng.integers(1, 4))):
            pred, truth = _random_pair(rng, k)
            cm.accumulate(pred, truth)
            ref += oracles.confusion_ref(truth, pred, k)
        if ref.sum() == 0:
            continue
        assert np.array_equal(cm.counts, ref)
        iou_r = oracles.iou_ref(ref)
        iou_g = per_class_iou(cm)
        assert np.array_equal(np.isnan(iou_g), np.isnan(iou_r))
        present = ~np.isnan(iou_r)
        assert np.array_equal(iou_g[present], iou_r[present])
        assert pixel_acc(cm) == ref.trace() / ref.sum()
        assert miou(cm) == iou_r[present].mean()


def test_frozen_two_class_case():
    cm = ConfusionMatrix(2)
    cm.counts[:] = [[3, 1], [2, 4]]
    np.testing.assert_allclose(per_class_iou(cm), [3 / 6, 4 / 7])
    assert pixel_acc(cm) == 0.7
    assert miou(cm) == (3 / 6 + 4 / 7) / 2
    iou = per_class_iou(cm)
    np.testing.assert_allclose(per_class_dice(cm), 2 * iou / (1 + iou))


@given(st.integers(0, 2**31 - 1), st.integers(2, 6))
def test_dice_never_falls_below_iou(seed, k):
    rng = np.random.default_rng(seed)
    cm = ConfusionMatrix(k)
    pred, truth = _random_pair(rng, k, with_ignored=False)
    cm.accumulate(pred, truth)
    iou = per_class_iou(cm)
    dce = per_class_dice(cm)
    present = ~np.isnan(iou)
    assert np.array_equal(np.isnan(iou), np.isnan(dce))
    assert np.all(dce[present] >= iou[present])
    np.testing.assert_allclose(dce[present], 2 * iou[present] / (1 + iou[present]),
                               rtol=0, atol=1e-15)


def test_absent_classes_stay_out_of_the_mean():
    cm = ConfusionMatrix(4)
    truth = np.array([[0, 0], [1, 1]])
    pred = np.array([[0, 1], [1, 1]])
    cm.accumulate(pred, truth)  # classes 2 and 3 never appear
    assert np.isnan(per_class_iou(cm)[2]) and np.isnan(per_class_iou(cm)[3])
    assert miou(cm) == (per_class_iou(cm)[0] + per_class_iou(cm)[1]) / 2
    assert miou_of(cm, [0, 1]) == miou(cm)
    assert miou_of(cm, [1]) == per_class_iou(cm)[1]
    # a subset that mixes absent and present classes skips the absent ones
    assert miou_of(cm, [1, 3]) == per_class_iou(cm)[1]
    with pytest.raises(ValueError, match="none of the classes"):
        miou_of(cm, [2, 3])
    with pytest.raises(ValueError, match="outside"):
        miou_of(cm, [4])
    with pytest.raises(ValueError, match="outside"):
        miou_of(cm, [])


def test_a_class_predicted_but_never_true_scores_zero():
    cm = ConfusionMatrix(3)
    cm.accumulate(np.array([[2, 2]]), np.array([[0, 0]]))
    iou = per_class_iou(cm)
    assert iou[2] == 0.0 and iou[0] == 0.0 and np.isnan(iou[1])


def test_ignored_pixels_do_not_count():
    cm = ConfusionMatrix(2)
    truth = np.array([[0, 255], [255, 1]])
    pred = np.array([[0, 1], [0, 1]])
    cm.accumulate(pred, truth)
    assert cm.total() == 2
    assert pixel_acc(cm) == 1.0


def test_merge_and_validation():
    a = ConfusionMatrix(3)
    b = ConfusionMatrix(3)
    a.accumulate(np.array([[0]]), np.array([[0]]))
    b.accumulate(np.array([[1]]), np.array([[2]]))
    a.merge(b)
    assert a.total() == 2 and a.counts[2, 1] == 1
    with pytest.raises(ValueError, match="cannot merge"):
        a.merge(ConfusionMatrix(4))
    with pytest.raises(ValueError, match="at least 2"):
        ConfusionMatrix(1)
    with pytest.raises(ValueError, match="shapes differ"):
        a.accumulate(np.zeros((2, 2), dtype=int), np.zeros((2, 3), dtype=int))
    with pytest.raises(ValueError, match=r"outside \[0, 3\)"):
        a.accumulate(np.array([[3]]), np.array([[0]]))
    with pytest.raises(ValueError, match=r"truth contains"):
        a.accumulate(np.array([[0]]), np.array([[-1]]))
    empty = ConfusionMatrix(2)
    with pytest.raises(ValueError, match="no scored pixels"):
        miou(empty)
    with pytest.raises(ValueError, match="no scored pixels"):
        pixel_acc(empty)
    with pytest.raises(ValueError, match="no scored pixels"):
        dice(empty)
