"""3D-3D registration: scale estimate, rigid fit, RANSAC and ICP."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .matching import adaptive_iterations
from .model import RigidTransform


class DegenerateConfiguration(ValueError):
    pass


@dataclass(eq=False)
class RegistrationResult:
    T: RigidTransform
    inlier_flags: np.ndarray
    rms_err: float

    @property
    def n_inliers(self) -> int:
        return int(np.count_nonzero(self.inlier_flags))


@dataclass(eq=False)
class IcpResult:
    T: RigidTransform
    rms_history: list[float] = field(default_factory=list)
    iterations: int = 0

    @property
    def rms(self) -> float:
        return self.rms_history[-1] if self.rms_history else float("nan")


def median_of_scales(a: np.ndarray, b: np.ndarray, max_points: int = 40, n_samples: int = 1000, seed=0) -> float:
    """Median over point pairs of ``|a_i - a_j| / |b_i - b_j|``.

    ``a`` is in the reference frame, ``b`` in the frame to be rescaled. Above
    ``max_points`` correspondences a seeded sample of ``n_samples`` pairs is used.
    """
    a = np.asarray(a, dtype=float).reshape(-1, 3)
    b = np.asarray(b, dtype=float).reshape(-1, 3)
    if len(a) != len(b):
        raise ValueError("correspondence arrays differ in length")
    n = len(a)
    if n < 2:
        raise DegenerateConfiguration("median of scales needs at least 2 correspondences")
    if n > max_points:
        rng = np.random.default_rng(seed)
        i = rng.integers(0, n, size=n_samples)
        j = rng.integers(0, n - 1, size=n_samples)
        j = np.where(j >= i, j + 1, j)
    else:
        i, j = np.triu_indices(n, k=1)
    db = np.linalg.norm(b[i] - b[j], axis=1)
    da = np.linalg.norm(a[i] - a[j], axis=1)
    ok = db >= 1e-9
    if not ok.any():
        raise DegenerateConfiguration("no correspondence pair with distinct points")
    return float(np.median(da[ok] / db[ok]))


def rigid_transform_3d(src: np.ndarray, dst: np.ndarray) -> tuple[RigidTransform, float]:
    """Least-squares rotation and translation taking ``src`` onto ``dst``.

    Returns the transform and the rms residual over all points.
    """
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    if len(src) != len(dst):
        raise ValueError("point sets differ in length")
    if len(src) < 3:
        raise DegenerateConfiguration("rigid fit needs at least 3 points")
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    S, D = src - cs, dst - cd
    sv = np.linalg.svd(S, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-12):
        raise DegenerateConfiguration("points are collinear")
    C = S.T @ D
    U, _, Vt = np.linalg.svd(C)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    if d == 0:
        d = 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    t = cd - R @ cs
    resid = dst - (src @ R.T + t)
    rms = float(np.sqrt(np.mean(np.sum(resid**2, axis=1))))
    return RigidTransform(R, t), rms


def _residuals(T: RigidTransform, src, dst) -> np.ndarray:
    return np.linalg.norm(T.apply(src) - dst, axis=1)


def ransac_6dof(
    src: np.ndarray,
    dst: np.ndarray,
    inlier_m: float = 0.2,
    confidence: float = 0.999,
    max_iters: int = 5000,
    seed=0,
) -> RegistrationResult | None:
    """Robust rigid transform taking ``src`` onto ``dst`` from 3-point hypotheses.

    Returns None when no hypothesis gathers three inliers.
    """
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    n = len(src)
    if n < 3 or len(dst) != n:
        raise ValueError("ransac_6dof needs at least 3 paired correspondences")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    best_count, best_T = 0, None
    needed, it = max_iters, 0
    while it < min(needed, max_iters):
        it += 1
        s = rng.choice(n, size=3, replace=False)
        try:
            T, _ = rigid_transform_3d(src[s], dst[s])
        except DegenerateConfiguration:
            continue
        count = int(np.count_nonzero(_residuals(T, src, dst) <= inlier_m))
        if count > best_count:
            best_count, best_T = count, T
            needed = adaptive_iterations(count / n, 3, confidence, max_iters)
    if best_T is None or best_count < 3:
        return None
    flags = _residuals(best_T, src, dst) <= inlier_m
    try:
        T, _ = rigid_transform_3d(src[flags], dst[flags])
    except DegenerateConfiguration:
        return None
    flags = _residuals(T, src, dst) <= inlier_m
    if flags.sum() < 3:
        return None
    r = _residuals(T, src[flags], dst[flags])
    return RegistrationResult(T, flags, float(np.sqrt(np.mean(r**2))))


def icp_refine(
    src_cloud: np.ndarray,
    dst_cloud: np.ndarray,
    T0: RigidTransform,
    max_iters: int = 50,
    tol: float = 1e-6,
) -> IcpResult:
    """Point-to-point ICP starting from ``T0``; the rms history never increases."""
    src = np.asarray(src_cloud, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst_cloud, dtype=float).reshape(-1, 3)
    if not len(src) or not len(dst):
        raise ValueError("ICP needs nonempty clouds")
    tree = cKDTree(dst)
    T = RigidTransform(T0.R, T0.t)
    moved = T.apply(src)
    dist, nn = tree.query(moved)
    rms = float(np.sqrt(np.mean(dist**2)))
    history = [rms]
    it = 0
    while it < max_iters and rms > 0:
        it += 1
        try:
            step, _ = rigid_transform_3d(moved, dst[nn])
        except DegenerateConfiguration:
            break
        T_new = step.compose(T)
        moved_new = T_new.apply(src)
        dist_new, nn_new = tree.query(moved_new)
        rms_new = float(np.sqrt(np.mean(dist_new**2)))
        if rms_new > rms:
            break
        improvement = rms - rms_new
        T, moved, nn, rms = T_new, moved_new, nn_new, rms_new
        history.append(rms)
        if improvement < tol:
            break
    return IcpResult(T, history, it)


def rotation_angle_deg(R: np.ndarray) -> float:
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))
