"""Pair alignment: matching cascade, 5DOF/8DOF RANSAC and model selection."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .homography import DegenerateError, ransac_h5, ransac_h8
from .matching import (
    Matches,
    bidirectional_filter,
    epipolar_filter,
    knn_match,
    lowe_filter,
)
from .model import Homography, ImageRecord
from .pairing import PairCandidate


@dataclass
class AlignConfig:
    lowe_ratio: float = 0.8
    inlier_px: float = 3.0
    epipolar_px: float = 3.0
    confidence: float = 0.999
    max_iters: int = 2000
    min_inliers: int = 80
    seed: int = 0


@dataclass(eq=False)
class AlignmentResult:
    """Outcome of aligning image A (``pair.query_id``) onto image B (``pair.map_id``).

    ``chosen.H`` maps A pixels to B pixels.
    """

    pair: PairCandidate
    chosen: Homography | None
    rejected_model: Homography | None = None
    matches_used: int = 0
    accepted: bool = False
    failed_stage: str | None = None
    stage_counts: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        def hdoc(h: Homography | None):
            if h is None:
                return None
            return {
                "dof": h.dof,
                "H": [float(v) for v in h.H.ravel()],
                "inliers": h.inliers.tolist(),
                "n_inliers": h.n_inliers,
                "rmse": float(h.rmse),
                "sigma_xy": [float(v) for v in h.sigma_xy],
            }

        return {
            "pair": self.pair.to_json(),
            "accepted": self.accepted,
            "failed_stage": self.failed_stage,
            "matches_used": int(self.matches_used),
            "stage_counts": {k: int(v) for k, v in self.stage_counts.items()},
            "chosen": hdoc(self.chosen),
            "rejected_model": hdoc(self.rejected_model),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "AlignmentResult":
        def hload(d):
            if d is None:
                return None
            return Homography(
                H=np.array(d["H"], dtype=float).reshape(3, 3),
                dof=int(d["dof"]),
                inliers=np.array(d["inliers"], dtype=np.int64).reshape(-1, 2),
                sigma_xy=np.array(d["sigma_xy"], dtype=float),
                rmse=float(d["rmse"]),
            )

        return cls(
            pair=PairCandidate.from_json(doc["pair"]),
            chosen=hload(doc["chosen"]),
            rejected_model=hload(doc.get("rejected_model")),
            matches_used=int(doc.get("matches_used", 0)),
            accepted=bool(doc["accepted"]),
            failed_stage=doc.get("failed_stage"),
            stage_counts=dict(doc.get("stage_counts", {})),
        )


def pair_seed(seed: int, *ids: str) -> np.random.SeedSequence:
    """Deterministic per-pair seed independent of processing order."""
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF] + [zlib.crc32(i.encode()) for i in ids])


def match_features(img_a: ImageRecord, img_b: ImageRecord, lowe_ratio: float = 0.8) -> tuple[Matches, dict]:
    fa, fb = img_a.features, img_b.features
    knn_ab = knn_match(fa.desc, fb.desc, k=2)
    knn_ba = knn_match(fb.desc, fa.desc, k=2)
    ab = lowe_filter(knn_ab, lowe_ratio)
    ba = lowe_filter(knn_ba, lowe_ratio)
    mutual = bidirectional_filter(ab, ba)
    return mutual, {"knn": len(fa), "lowe_ab": len(ab), "lowe_ba": len(ba), "bidirectional": len(mutual)}


def align_pair(
    img_a: ImageRecord,
    img_b: ImageRecord,
    config: AlignConfig | None = None,
    pair: PairCandidate | None = None,
) -> AlignmentResult:
    cfg = config or AlignConfig()
    if pair is None:
        pair = PairCandidate(img_a.id, img_b.id, 0.0, 0.0)
    res = AlignmentResult(pair=pair, chosen=None)
    fa, fb = img_a.features, img_b.features
    if len(fa) < 2 or len(fb) < 2:
        res.failed_stage = "features"
        return res

    try:
        mutual, counts = match_features(img_a, img_b, cfg.lowe_ratio)
    except ValueError:
        res.failed_stage = "match"
        return res
    res.stage_counts.update(counts)

    seeds = pair_seed(cfg.seed, img_a.id, img_b.id).spawn(3)
    epi = epipolar_filter(
        mutual,
        fa.px,
        fb.px,
        threshold_px=cfg.epipolar_px,
        confidence=cfg.confidence,
        max_iters=cfg.max_iters,
        seed=np.random.default_rng(seeds[0]),
    )
    m = epi.matches
    res.stage_counts["epipolar"] = len(m)
    res.matches_used = len(m)

    src, dst = fa.px[m.idx_a], fb.px[m.idx_b]
    idx = np.column_stack([m.idx_a, m.idx_b])
    kw = dict(inlier_px=cfg.inlier_px, confidence=cfg.confidence, max_iters=cfg.max_iters)
    models = {}
    for dof, fn, sd in ((5, ransac_h5, seeds[1]), (8, ransac_h8, seeds[2])):
        try:
            models[dof] = fn(src, dst, idx, seed=np.random.default_rng(sd), **kw)
        except DegenerateError:
            models[dof] = None
    h5, h8 = models[5], models[8]
    if h5 is None and h8 is None:
        res.failed_stage = "ransac"
        return res
    if h8 is None or (h5 is not None and h5.n_inliers >= h8.n_inliers):
        res.chosen, res.rejected_model = h5, h8
    else:
        res.chosen, res.rejected_model = h8, h5
    res.stage_counts["inliers_5dof"] = 0 if h5 is None else h5.n_inliers
    res.stage_counts["inliers_8dof"] = 0 if h8 is None else h8.n_inliers
    res.accepted = res.chosen.n_inliers >= cfg.min_inliers
    if not res.accepted:
        res.failed_stage = "min_inliers"
    return res
