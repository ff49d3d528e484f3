"""Per-map-image aggregation of pair change masks into a master mask."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ChangeMask, ImageRecord

DEFAULT_MIN_SUPPORT = 20
DEFAULT_VOTE_THRESHOLD = 0.5


@dataclass(eq=False)
class MasterMask:
    map_id: str
    support: int
    avg: np.ndarray  # float64 (h, w) in [0, 1]
    binary: ChangeMask


def aggregate_masks(masks: list[ChangeMask], min_support: int = DEFAULT_MIN_SUPPORT) -> np.ndarray | None:
    """Per-pixel mean of the masks, or None when fewer than ``min_support`` are given."""
    if masks:
        shape = masks[0].shape
        for m in masks:
            if m.shape != shape:
                raise ValueError(f"mask {m.image_id!r} has shape {m.shape}, expected {shape}")
    if len(masks) < min_support or not masks:
        return None
    counts = np.zeros(masks[0].shape, dtype=np.int64)
    for m in masks:
        counts += m.bits
    return counts / len(masks)


def threshold_master(avg: np.ndarray, vote_threshold: float = DEFAULT_VOTE_THRESHOLD, image_id: str = "") -> ChangeMask:
    avg = np.asarray(avg, dtype=float)
    if avg.size and (avg.min() < 0 or avg.max() > 1):
        raise ValueError("average raster must lie in [0, 1]")
    return ChangeMask(image_id, avg >= vote_threshold)


def build_master(
    map_id: str,
    masks: list[ChangeMask],
    min_support: int = DEFAULT_MIN_SUPPORT,
    vote_threshold: float = DEFAULT_VOTE_THRESHOLD,
) -> MasterMask | None:
    avg = aggregate_masks(masks, min_support)
    if avg is None:
        return None
    return MasterMask(map_id, len(masks), avg, threshold_master(avg, vote_threshold, map_id))


def tag_changed_features(master: MasterMask, img: ImageRecord) -> set[int]:
    """Indices of features with a 3D value lying on a set pixel of the master mask."""
    f = img.features
    if not len(f):
        return set()
    bits = master.binary.bits
    rows = np.clip(f.px[:, 1].astype(np.int64), 0, bits.shape[0] - 1)
    cols = np.clip(f.px[:, 0].astype(np.int64), 0, bits.shape[1] - 1)
    hit = bits[rows, cols] & f.has_world
    return set(np.flatnonzero(hit).tolist())


def query_average(warped_query_masks: list[np.ndarray]) -> np.ndarray:
    """Diagnostic mean of query-side masks already warped into the map frame."""
    stack = np.stack([np.asarray(m, dtype=float) for m in warped_query_masks])
    return stack.mean(axis=0)
