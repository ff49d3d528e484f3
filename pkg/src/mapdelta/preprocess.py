"""Filters applied before change detection: near-field depth, semantics, common FOV."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import Homography, ImageRecord, LabelRaster

DEFAULT_MIN_FEATURE_DIST = 3.0


@dataclass(frozen=True)
class SemanticPolicy:
    exempt_class_ids: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        ids = frozenset(int(i) for i in self.exempt_class_ids)
        if any(i < 0 or i > 0xFFFF for i in ids):
            raise ValueError("exempt class ids must fit in 16 bits")
        object.__setattr__(self, "exempt_class_ids", ids)


@dataclass(frozen=True)
class DepthFilterResult:
    usable: np.ndarray  # sorted feature indices
    no_3d: np.ndarray  # bool per usable index: retained without a 3D value


def depth_filter(img: ImageRecord, min_dist: float = DEFAULT_MIN_FEATURE_DIST) -> DepthFilterResult:
    """Drop features whose 3D point is closer than ``min_dist`` to the camera center.

    Features without a 3D value are kept and flagged.
    """
    f = img.features
    d = np.linalg.norm(f.world - img.pose.position, axis=1)
    keep = ~f.has_world | (d >= min_dist)
    usable = np.flatnonzero(keep)
    return DepthFilterResult(usable=usable, no_3d=~f.has_world[usable])


def semantic_exempt_mask(sem: LabelRaster, policy: SemanticPolicy) -> np.ndarray:
    """True where the pixel's class may be counted as change."""
    if not policy.exempt_class_ids:
        return np.ones(sem.labels.shape, dtype=bool)
    exempt = np.fromiter(sorted(policy.exempt_class_ids), dtype=np.int64)
    return ~np.isin(sem.labels, exempt)


def pixel_centers(width: int, height: int) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width]
    return np.column_stack([xs.ravel() + 0.5, ys.ravel() + 0.5])


def common_fov_mask(H: Homography | np.ndarray, src_dims, dst_dims) -> np.ndarray:
    """(h, w) bool raster over the destination image.

    A destination pixel is set when its center, mapped back through ``H^-1``,
    falls inside the source image. ``H`` maps source pixels to destination
    pixels; dims are ``(width, height)``.
    """
    M = H.H if isinstance(H, Homography) else np.asarray(H, dtype=float)
    Hi = np.linalg.inv(M)
    sw, sh = src_dims
    dw, dh = dst_dims
    ys, xs = np.mgrid[0:dh, 0:dw]
    x = xs + 0.5
    y = ys + 0.5
    den = Hi[2, 0] * x + Hi[2, 1] * y + Hi[2, 2]
    ok = np.abs(den) > 1e-12
    den = np.where(ok, den, 1.0)
    u = (Hi[0, 0] * x + Hi[0, 1] * y + Hi[0, 2]) / den
    v = (Hi[1, 0] * x + Hi[1, 1] * y + Hi[1, 2]) / den
    return ok & (u >= 0) & (u < sw) & (v >= 0) & (v < sh)
