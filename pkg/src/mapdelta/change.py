"""Per-pair change detection.

Each feature of the target image is checked against the aligned source image
with two conditions: a warped source feature must lie within a pixel radius
(geometry) and have a small enough descriptor distance (appearance). Visual
segments then vote by their share of failing features, and the resulting mask
is cleaned of small blobs and holes.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import ndimage

from .alignment import AlignmentResult
from .grid import radius_pairs
from .homography import warp_points
from .matching import Matches, knn_match
from .model import ChangeMask, Homography, ImageRecord, LabelRaster, MapBundle
from .preprocess import (
    DEFAULT_MIN_FEATURE_DIST,
    SemanticPolicy,
    common_fov_mask,
    depth_filter,
    semantic_exempt_mask,
)


@dataclass(frozen=True)
class ChangeParams:
    visual_mult: float = 1.5
    geom_radius_px: float = 50.0
    blob_bad_ratio: float = 0.5
    min_blob_area_px: int = 200
    max_hole_area_px: int = 100
    min_feature_dist_m: float = DEFAULT_MIN_FEATURE_DIST

    def __post_init__(self):
        for name in ("visual_mult", "geom_radius_px", "min_blob_area_px", "max_hole_area_px", "min_feature_dist_m"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.blob_bad_ratio <= 1:
            raise ValueError("blob_bad_ratio must lie in (0, 1]")


class Verdict(Enum):
    GOOD = "good"
    BAD = "bad"
    NO_MATCH_CANDIDATE = "no_match_candidate"


@dataclass(frozen=True)
class FeatureVerdict:
    feature_idx: int
    state: Verdict
    best_dist: float | None = None

    @property
    def is_bad(self) -> bool:
        return self.state is not Verdict.GOOD


def visual_threshold(matches: Matches | np.ndarray, mult: float) -> float:
    """``mult`` times the median match distance (mean of the central pair for even counts)."""
    d = matches.dist if isinstance(matches, Matches) else np.asarray(matches, dtype=float)
    if not len(d):
        raise ValueError("visual threshold needs at least one match")
    return float(mult * np.median(d))


def _usable(img: ImageRecord, usable) -> np.ndarray:
    if usable is None:
        return np.arange(len(img.features))
    return np.asarray(usable, dtype=np.int64)


def classify_features(
    target: ImageRecord,
    source: ImageRecord,
    H: Homography | np.ndarray | None,
    params: ChangeParams = ChangeParams(),
    usable: tuple | None = None,
    eligible: np.ndarray | None = None,
    threshold: float | None = None,
) -> list[FeatureVerdict]:
    """Verdicts for target features.

    ``H`` maps source pixels into the target frame. ``usable`` is an optional
    ``(target_indices, source_indices)`` pair from the depth filter and
    ``eligible`` an (h, w) raster over the target; features outside it get no
    verdict. When ``eligible`` is omitted the common-FOV mask is used.
    ``threshold`` overrides the median-based visual threshold.
    """
    if H is None:
        raise ValueError("classify_features needs a homography")
    M = H.H if isinstance(H, Homography) else np.asarray(H, dtype=float)
    ft, fs = target.features, source.features
    t_idx = _usable(target, None if usable is None else usable[0])
    s_idx = _usable(source, None if usable is None else usable[1])
    if eligible is None:
        eligible = common_fov_mask(M, source.dims, target.dims)
    if not len(t_idx):
        return []

    tpx = ft.px[t_idx]
    rows = np.clip(tpx[:, 1].astype(np.int64), 0, eligible.shape[0] - 1)
    cols = np.clip(tpx[:, 0].astype(np.int64), 0, eligible.shape[1] - 1)
    inside = eligible[rows, cols]
    t_idx, tpx = t_idx[inside], tpx[inside]
    if not len(t_idx):
        return []

    if threshold is None:
        if len(s_idx) >= 1:
            knn = knn_match(ft.desc[t_idx], fs.desc[s_idx], k=1)
            threshold = visual_threshold(knn.dist[:, 0], params.visual_mult)
        else:
            threshold = 0.0

    if len(s_idx):
        warped = warp_points(M, fs.px[s_idx])
        finite = np.all(np.isfinite(warped), axis=1)
        s_idx, warped = s_idx[finite], warped[finite]
    else:
        warped = np.zeros((0, 2))
    qi, pj = radius_pairs(tpx, warped, params.geom_radius_px)

    best = np.full(len(t_idx), np.inf)
    has_cand = np.zeros(len(t_idx), dtype=bool)
    if len(qi):
        diff = ft.desc[t_idx[qi]].astype(np.float64) - fs.desc[s_idx[pj]].astype(np.float64)
        dist = np.sqrt(np.sum(diff * diff, axis=1))
        np.minimum.at(best, qi, dist)
        has_cand[qi] = True

    out = []
    for k, i in enumerate(t_idx.tolist()):
        if has_cand[k] and best[k] <= threshold:
            out.append(FeatureVerdict(i, Verdict.GOOD, float(best[k])))
        elif has_cand[k]:
            out.append(FeatureVerdict(i, Verdict.BAD, float(best[k])))
        else:
            out.append(FeatureVerdict(i, Verdict.NO_MATCH_CANDIDATE, None))
    return out


def blob_vote(
    visual: LabelRaster,
    verdicts: list[FeatureVerdict],
    eligible: np.ndarray,
    params: ChangeParams,
    px: np.ndarray,
    image_id: str = "",
) -> ChangeMask:
    """Mark visual segments where failing features outnumber the ratio.

    ``px`` holds the target image's feature pixels, indexed by ``feature_idx``.
    Only verdicts on eligible pixels vote; segments without votes stay unmarked.
    """
    labels = visual.labels
    eligible = np.asarray(eligible, dtype=bool)
    if not verdicts:
        return ChangeMask(image_id, np.zeros(labels.shape, dtype=bool))
    idx = np.array([v.feature_idx for v in verdicts], dtype=np.int64)
    bad = np.array([v.is_bad for v in verdicts], dtype=bool)
    p = np.asarray(px, dtype=float)[idx]
    rows = np.clip(p[:, 1].astype(np.int64), 0, labels.shape[0] - 1)
    cols = np.clip(p[:, 0].astype(np.int64), 0, labels.shape[1] - 1)
    on = eligible[rows, cols]
    seg = labels[rows[on], cols[on]].astype(np.int64)
    bad = bad[on]
    n_lab = 0x10000
    n_bad = np.bincount(seg[bad], minlength=n_lab)
    n_all = np.bincount(seg, minlength=n_lab)
    voted = n_all > 0
    ratio = np.zeros(n_lab)
    ratio[voted] = n_bad[voted] / n_all[voted]
    changed = voted & (ratio > params.blob_bad_ratio)
    return ChangeMask(image_id, changed[labels] & eligible)


def clean_mask(mask: ChangeMask, params: ChangeParams) -> ChangeMask:
    """Drop 4-connected blobs below the area floor, then fill small interior holes."""
    bits = mask.bits.copy()
    lab, n = ndimage.label(bits)
    if n:
        sizes = np.bincount(lab.ravel())
        small = sizes < params.min_blob_area_px
        small[0] = False
        bits[small[lab]] = False
    holes, n = ndimage.label(~bits)
    if n:
        sizes = np.bincount(holes.ravel())
        border = np.unique(np.concatenate([holes[0], holes[-1], holes[:, 0], holes[:, -1]]))
        fill = sizes < params.max_hole_area_px
        fill[0] = False
        fill[border] = False
        bits[fill[holes]] = True
    return ChangeMask(mask.image_id, bits)


@dataclass(eq=False)
class SideResult:
    mask: ChangeMask
    eligible: np.ndarray
    verdicts: list[FeatureVerdict]
    threshold: float


def detect_side(
    target: ImageRecord,
    source: ImageRecord,
    H: np.ndarray,
    params: ChangeParams,
    policy: SemanticPolicy,
) -> SideResult:
    """Change mask on ``target``; ``H`` maps source pixels to target pixels."""
    for img in (target, source):
        if img.visual is None or img.semantic is None:
            raise ValueError(f"image {img.id!r} lacks semantic or visual rasters")
    ut = depth_filter(target, params.min_feature_dist_m).usable
    us = depth_filter(source, params.min_feature_dist_m).usable
    eligible = semantic_exempt_mask(target.semantic, policy) & common_fov_mask(H, source.dims, target.dims)
    if len(ut) and len(us):
        knn = knn_match(target.features.desc[ut], source.features.desc[us], k=1)
        thr = visual_threshold(knn.dist[:, 0], params.visual_mult)
    else:
        thr = 0.0
    verdicts = classify_features(target, source, H, params, (ut, us), eligible, thr)
    voted = blob_vote(target.visual, verdicts, eligible, params, target.features.px, target.id)
    cleaned = clean_mask(voted, params)
    return SideResult(ChangeMask(target.id, cleaned.bits & eligible), eligible, verdicts, thr)


def detect_change(
    pair: AlignmentResult,
    bundle: MapBundle,
    params: ChangeParams = ChangeParams(),
    policy: SemanticPolicy = SemanticPolicy(),
) -> tuple[ChangeMask, ChangeMask]:
    """(map-side mask, query-side mask) for an accepted alignment.

    The alignment homography maps query pixels to map pixels.
    """
    if not pair.accepted or pair.chosen is None:
        raise ValueError("detect_change needs an accepted alignment")
    q = bundle[pair.pair.query_id]
    m = bundle[pair.pair.map_id]
    H = pair.chosen.H
    map_side = detect_side(m, q, H, params, policy)
    query_side = detect_side(q, m, np.linalg.inv(H), params, policy)
    return map_side.mask, query_side.mask
