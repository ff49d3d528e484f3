"""Map maintenance: tag application, changed-feature removal and section merging."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .model import CameraPose, Features, ImageRecord, MapBundle, RigidTransform, Tag
from .registration import (
    DegenerateConfiguration,
    icp_refine,
    median_of_scales,
    ransac_6dof,
)


@dataclass(frozen=True)
class Correspondence3D:
    """A 3D point in the old map frame (``a``) and its counterpart in the new section (``b``)."""

    a: tuple[float, float, float]
    b: tuple[float, float, float]

    def __post_init__(self):
        a = tuple(float(v) for v in self.a)
        b = tuple(float(v) for v in self.b)
        if len(a) != 3 or len(b) != 3 or not np.all(np.isfinite(a + b)):
            raise ValueError("correspondence needs two finite 3-vectors")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)


def correspondence_arrays(corr: list[Correspondence3D]) -> tuple[np.ndarray, np.ndarray]:
    a = np.array([c.a for c in corr], dtype=float).reshape(-1, 3)
    b = np.array([c.b for c in corr], dtype=float).reshape(-1, 3)
    return a, b


def load_correspondences(doc) -> list[Correspondence3D]:
    """Accepts ``[{"a": [..], "b": [..]}, ...]`` or ``{"a": [[..]], "b": [[..]]}``."""
    if isinstance(doc, dict):
        if len(doc["a"]) != len(doc["b"]):
            raise ValueError("correspondence lists differ in length")
        return [Correspondence3D(a, b) for a, b in zip(doc["a"], doc["b"])]
    return [Correspondence3D(c["a"], c["b"]) for c in doc]


def apply_tags(bundle: MapBundle, changed: dict[str, set[int]], unchanged: dict[str, set[int]] | None = None) -> MapBundle:
    """New bundle with change tags set; a CHANGED tag is never downgraded."""
    images = dict(bundle.images)
    for iid in sorted(set(changed) | set(unchanged or {})):
        img = images[iid]
        tags = img.features.changed.copy()
        n = len(tags)
        for idx in (unchanged or {}).get(iid, ()):
            if not 0 <= idx < n:
                raise IndexError(f"image {iid!r}: tag index {idx} out of range")
            if tags[idx] == Tag.UNTAGGED:
                tags[idx] = Tag.UNCHANGED
        for idx in changed.get(iid, ()):
            if not 0 <= idx < n:
                raise IndexError(f"image {iid!r}: tag index {idx} out of range")
            tags[idx] = Tag.CHANGED
        f = img.features
        images[iid] = img.with_features(Features(f.px, f.desc, f.world, f.has_world, tags))
    return replace(bundle, images=images)


def remove_changed(bundle: MapBundle, tags: dict[str, set[int]]) -> MapBundle:
    """Drop tagged features (keypoint, descriptor and 3D point) from every image."""
    images = dict(bundle.images)
    for iid, idx in tags.items():
        if iid not in images:
            raise KeyError(f"tag for unknown image {iid!r}")
        if not idx:
            continue
        img = images[iid]
        n = len(img.features)
        idx = np.fromiter(idx, dtype=np.int64)
        if idx.min() < 0 or idx.max() >= n:
            raise IndexError(f"image {iid!r}: dangling tag index")
        keep = np.ones(n, dtype=bool)
        keep[idx] = False
        images[iid] = img.with_features(img.features.subset(keep))
    return replace(bundle, images=images)


@dataclass
class AugmentReport:
    ok: bool
    scale: float | None = None
    ransac_T: np.ndarray | None = None
    ransac_inliers: int = 0
    ransac_rms: float | None = None
    icp_T: np.ndarray | None = None
    icp_rms: list[float] = field(default_factory=list)
    merged_ids: dict[str, str] = field(default_factory=dict)
    reason: str | None = None

    def to_json(self) -> dict:
        def mat(m):
            return None if m is None else [float(v) for v in np.asarray(m).ravel()]

        return {
            "ok": self.ok,
            "reason": self.reason,
            "scale": self.scale,
            "ransac": {"T": mat(self.ransac_T), "n_inliers": self.ransac_inliers, "rms": self.ransac_rms},
            "icp": {"T": mat(self.icp_T), "rms": self.icp_rms},
            "merged_ids": self.merged_ids,
        }


def transform_image(img: ImageRecord, T: RigidTransform, new_id: str | None = None) -> ImageRecord:
    f = img.features
    world = f.world.copy()
    world[f.has_world] = T.apply(f.world[f.has_world])
    pose = CameraPose(T.apply(img.pose.position[None])[0], T.R @ img.pose.orientation)
    return replace(
        img,
        id=new_id or img.id,
        pose=pose,
        features=Features(f.px, f.desc, world, f.has_world, f.changed),
    )


def section_points(bundle: MapBundle) -> np.ndarray:
    pts = [im.features.world[im.features.has_world] for im in bundle.images.values()]
    pts = [p for p in pts if len(p)]
    return np.unique(np.vstack(pts), axis=0) if pts else np.zeros((0, 3))


def augment_map(
    old: MapBundle,
    section: MapBundle,
    old_pts: np.ndarray,
    section_pts: np.ndarray,
    inlier_m: float = 0.2,
    confidence: float = 0.999,
    max_iters: int = 5000,
    icp_iters: int = 50,
    icp_tol: float = 1e-6,
    seed=0,
    prefix: str = "aug_",
) -> tuple[MapBundle, AugmentReport]:
    """Register ``section`` into ``old`` and merge.

    ``old_pts[i]`` and ``section_pts[i]`` are corresponding 3D points. The
    section is rescaled by the median of scales, placed by 3D-3D RANSAC, and
    refined by ICP over the full point sets. On failure the old bundle is
    returned unchanged with ``report.ok`` false.
    """
    if not section.images:
        return old, AugmentReport(ok=True, reason="empty section")
    old_pts = np.asarray(old_pts, dtype=float).reshape(-1, 3)
    section_pts = np.asarray(section_pts, dtype=float).reshape(-1, 3)
    try:
        scale = median_of_scales(old_pts, section_pts, seed=seed)
    except DegenerateConfiguration as exc:
        return old, AugmentReport(ok=False, reason=f"scale: {exc}")
    if len(old_pts) < 3:
        return old, AugmentReport(ok=False, scale=scale, reason="fewer than 3 correspondences")

    reg = ransac_6dof(section_pts * scale, old_pts, inlier_m, confidence, max_iters, seed)
    if reg is None:
        return old, AugmentReport(ok=False, scale=scale, reason="3D-3D RANSAC found no model")
    report = AugmentReport(
        ok=True, scale=scale, ransac_T=reg.T.T, ransac_inliers=reg.n_inliers, ransac_rms=reg.rms_err
    )

    src_cloud = section_points(section) * scale
    dst_cloud = section_points(old)
    if len(src_cloud) and len(dst_cloud):
        icp = icp_refine(src_cloud, dst_cloud, reg.T, icp_iters, icp_tol)
        T = icp.T
        report.icp_rms = icp.rms_history
    else:
        T = reg.T
    report.icp_T = T.T
    full = RigidTransform(T.R, T.t, scale)

    images = dict(old.images)
    for sid in section.ids():
        new_id = prefix + sid
        while new_id in images:
            new_id = prefix + new_id
        images[new_id] = transform_image(section.images[sid], full, new_id)
        report.merged_ids[sid] = new_id
    merged = replace(old, images=images)
    merged.validate()
    return merged, report
