import numpy as np
import pytest
from oracles import confusion_loop, metrics_per_pixel

from mapdelta.metrics import Confusion, confusion, evaluate_pairs, f1, fwiou, iou, miou


def test_against_per_pixel_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        density = rng.random()
        pred = rng.random((16, 16)) < density
        gt = rng.random((16, 16)) < rng.random()
        c = confusion(pred, gt)
        assert (c.tp, c.fp, c.fn, c.tn) == confusion_loop(pred, gt)
        m, fw, f = metrics_per_pixel(pred, gt)
        assert abs(miou(c) - m) < 1e-12
        assert abs(fwiou(c) - fw) < 1e-12
        assert abs(f1(c) - f) < 1e-12


def test_worked_example():
    c = Confusion(tp=50, fp=25, fn=25, tn=100)
    assert f1(c) == pytest.approx(2 / 3)
    assert miou(c) == pytest.approx(0.5833, abs=1e-4)
    assert fwiou(c) == pytest.approx(0.6042, abs=1e-4)


def test_small_example():
    # 10 pixels: 3 true change, 4 predicted change, 2 overlap.
    c = Confusion(tp=2, fp=2, fn=1, tn=5)
    iou_bg, iou_ch = 5 / 8, 2 / 5
    assert miou(c) == pytest.approx((iou_bg + iou_ch) / 2)
    assert fwiou(c) == pytest.approx((7 * iou_bg + 3 * iou_ch) / 10)
    assert f1(c) == pytest.approx(4 / 7)
    assert iou(c) == pytest.approx(0.4)


def test_empty_masks_score_one():
    z = np.zeros((4, 4), bool)
    c = confusion(z, z)
    assert miou(c) == 1.0 and fwiou(c) == 1.0 and f1(c) == 1.0


def test_shape_mismatch():
    with pytest.raises(ValueError):
        confusion(np.zeros((2, 2), bool), np.zeros((2, 3), bool))
    with pytest.raises(ValueError):
        Confusion(-1, 0, 0, 0)


def test_micro_and_macro():
    a = (np.array([[1, 1], [0, 0]], bool), np.array([[1, 0], [0, 0]], bool))
    b = (np.zeros((2, 2), bool), np.array([[0, 0], [0, 1]], bool))
    micro = evaluate_pairs({"a": a, "b": b})["all"]
    assert micro["averaging"] == "micro"
    assert micro["F1"] == pytest.approx(2 * 1 / (2 * 1 + 1 + 1))
    macro = evaluate_pairs({"a": a, "b": b}, macro=True)["all"]
    assert macro["F1"] == pytest.approx((2 / 3 + 0.0) / 2)
