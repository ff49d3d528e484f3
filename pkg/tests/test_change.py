import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mapdelta.change import (
    ChangeParams,
    Verdict,
    blob_vote,
    classify_features,
    clean_mask,
    visual_threshold,
)
from mapdelta.model import CameraPose, ChangeMask, Features, ImageRecord, LabelRaster

P = ChangeParams()


def _img(iid, px, desc, w=300, h=300):
    f = Features.from_arrays(np.asarray(px, float), np.asarray(desc, float))
    return ImageRecord(iid, "map", CameraPose(np.zeros(3), np.eye(3)), w, h, f)


def test_visual_threshold_median():
    assert visual_threshold(np.array([1.0, 2, 3, 4]), 1.5) == pytest.approx(3.75)
    assert visual_threshold(np.array([5.0, 1, 3]), 1.5) == pytest.approx(4.5)
    with pytest.raises(ValueError):
        visual_threshold(np.zeros(0), 1.5)


def test_verdict_examples():
    e = np.eye(4)
    target = _img("t", [[100, 100], [200, 100], [100, 250]], [e[0], e[1], e[2]])
    # Source: near match for feature 0, near but dissimilar for 1, nothing near 2.
    source = _img("s", [[130, 100], [200, 140], [280, 20]], [e[0], e[3], e[2]])
    v = classify_features(target, source, np.eye(3), P, threshold=0.5)
    states = {x.feature_idx: x.state for x in v}
    assert states == {0: Verdict.GOOD, 1: Verdict.BAD, 2: Verdict.NO_MATCH_CANDIDATE}


def test_radius_boundary():
    e = np.eye(2)
    target = _img("t", [[100, 100], [100, 200]], [e[0], e[1]])
    source = _img("s", [[150, 100], [150.01, 200]], [e[0], e[1]])
    v = {x.feature_idx: x.state for x in classify_features(target, source, np.eye(3), P, threshold=0.1)}
    assert v[0] is Verdict.GOOD and v[1] is Verdict.NO_MATCH_CANDIDATE


def _vote(n_bad, n_good):
    labels = LabelRaster(np.zeros((10, 10), dtype=np.int64))
    px = np.full((n_bad + n_good, 2), 5.0)
    from mapdelta.change import FeatureVerdict

    v = [FeatureVerdict(i, Verdict.BAD if i < n_bad else Verdict.GOOD) for i in range(n_bad + n_good)]
    return blob_vote(labels, v, np.ones((10, 10), bool), P, px).bits


def test_blob_vote_strict_majority():
    assert not _vote(2, 2).any()
    assert _vote(3, 2).all()
    assert not _vote(0, 0).any()


def _square_mask(side, shape=(60, 60)):
    b = np.zeros(shape, bool)
    b[5 : 5 + side, 5 : 5 + side] = True
    return b


def test_clean_mask_blob_floor():
    b = np.zeros((60, 60), bool)
    b[0:10, 0:20] = True  # 200 px, kept
    b[30:40, 30:49] = True  # 190 px
    b[50, 30:39] = True  # grows the second blob to 199 px
    out = clean_mask(ChangeMask("x", b), P).bits
    assert out[0:10, 0:20].all()
    assert not out[30:, :].any()


def test_clean_mask_fills_small_holes():
    b = _square_mask(40)
    b[10:19, 10:21] = False  # 99 px hole
    b[25:35, 25:35] = False  # 100 px hole
    out = clean_mask(ChangeMask("x", b), P).bits
    assert out[10:19, 10:21].all()
    assert not out[25:35, 25:35].any()


def test_blob_adjacent_diagonally_is_separate():
    b = np.zeros((40, 40), bool)
    b[0:10, 0:10] = True  # 100 px
    b[10:20, 10:20] = True  # 100 px, touches only at a corner
    assert not clean_mask(ChangeMask("x", b), P).bits.any()


@given(st.integers(0, 10_000))
def test_clean_mask_idempotent_on_large_blobs(seed):
    rng = np.random.default_rng(seed)
    b = np.zeros((80, 80), bool)
    for _ in range(3):
        r, c = rng.integers(0, 60, 2)
        b[r : r + 20, c : c + 20] = True
    once = clean_mask(ChangeMask("x", b), P).bits
    assert (clean_mask(ChangeMask("x", once), P).bits == once).all()
    assert once[b].all()
