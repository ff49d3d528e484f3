"""Indirect change detection: carry tags from master images to other map images."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .aggregate import MasterMask
from .grid import radius_pairs
from .model import ImageRecord, Tag
from .pairing import angular_separation


@dataclass(frozen=True)
class PropagationParams:
    min_global_corr: float = 0.25
    max_fov_sep_rad: float = 0.4
    search_radius_m: float = 1.0
    significant_change_frac: float = 0.05

    def __post_init__(self):
        for name in ("min_global_corr", "max_fov_sep_rad", "search_radius_m", "significant_change_frac"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("min_global_corr", "significant_change_frac"):
            if not getattr(self, name) < 1:
                raise ValueError(f"{name} must be below 1")


def global_similarity(g1, g2, tol: float = 1e-6) -> float:
    if g1 is None or g2 is None:
        raise ValueError("missing global descriptor")
    a = np.asarray(g1, dtype=float)
    b = np.asarray(g2, dtype=float)
    if a.shape != b.shape:
        raise ValueError("global descriptors differ in length")
    if abs(np.linalg.norm(a) - 1) > tol or abs(np.linalg.norm(b) - 1) > tol:
        raise ValueError("global descriptors must be unit norm")
    return float(np.clip(np.dot(a, b), -1.0, 1.0))


def find_master_match(
    target: ImageRecord,
    masters: list[tuple[MasterMask, ImageRecord]],
    params: PropagationParams = PropagationParams(),
) -> tuple[MasterMask, ImageRecord] | None:
    """Most globally similar master passing the correlation and LOS gates.

    Ties go to the lexicographically smaller map id.
    """
    if target.global_desc is None:
        return None
    best, best_key = None, None
    for master, img in masters:
        if img.id == target.id or img.global_desc is None:
            continue
        rho = global_similarity(target.global_desc, img.global_desc)
        sep = angular_separation(target.pose.los, img.pose.los)
        if rho < params.min_global_corr or sep > params.max_fov_sep_rad:
            continue
        key = (-rho, master.map_id)
        if best_key is None or key < best_key:
            best, best_key = (master, img), key
    return best


def propagate_change(master_changed_points: np.ndarray, target: ImageRecord, radius: float = 1.0) -> set[int]:
    """Target features (with 3D) within ``radius`` meters of any changed master point."""
    pts = np.asarray(master_changed_points, dtype=float).reshape(-1, 3)
    f = target.features
    with3d = np.flatnonzero(f.has_world)
    if not len(pts) or not len(with3d):
        return set()
    qi, _ = radius_pairs(f.world[with3d], pts, radius)
    return set(with3d[np.unique(qi)].tolist())


def is_significantly_changed(img: ImageRecord, frac: float = 0.05) -> bool:
    f = img.features
    n3d = int(f.has_world.sum())
    if n3d == 0:
        return False
    changed = int(np.count_nonzero((f.changed == Tag.CHANGED) & f.has_world))
    return changed / n3d >= frac
