"""5DOF and 8DOF homography estimation.

The 5DOF model keeps vertical image lines vertical::

    u = (a*x + b) / (e*x + 1)
    v = (c*y + d) / (e*x + 1)

which is the matrix ``[[a, 0, b], [0, c, d], [e, 0, 1]]``. Multiplying out the
denominators gives two linear equations per correspondence::

    u = a*x + b         - e*x*u
    v =         c*y + d - e*x*v
"""

from __future__ import annotations

import numpy as np

from .matching import adaptive_iterations
from .model import Homography

RANK_TOL = 1e-10


class DegenerateError(ValueError):
    """The correspondences do not determine a model."""


def warp_points(H: np.ndarray | Homography, pts: np.ndarray) -> np.ndarray:
    """Apply H to an (n, 2) array; points mapped to infinity come back as NaN."""
    M = H.H if isinstance(H, Homography) else np.asarray(H, dtype=float)
    p = np.asarray(pts, dtype=float).reshape(-1, 2)
    q = p @ M[:, :2].T + M[:, 2]
    w = q[:, 2]
    bad = np.abs(w) <= 1e-12
    w = np.where(bad, np.nan, w)
    return q[:, :2] / w[:, None]


def warp_point(H: np.ndarray | Homography, p) -> np.ndarray:
    M = H.H if isinstance(H, Homography) else np.asarray(H, dtype=float)
    x, y = float(p[0]), float(p[1])
    w = M[2, 0] * x + M[2, 1] * y + M[2, 2]
    if abs(w) <= 1e-12:
        raise ValueError("point maps to infinity under H")
    return np.array([(M[0, 0] * x + M[0, 1] * y + M[0, 2]) / w, (M[1, 0] * x + M[1, 1] * y + M[1, 2]) / w])


def h5_design(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x, y = src[:, 0], src[:, 1]
    u, v = dst[:, 0], dst[:, 1]
    n = len(x)
    zero, one = np.zeros(n), np.ones(n)
    top = np.column_stack([x, one, zero, zero, -x * u])
    bottom = np.column_stack([zero, zero, y, one, -x * v])
    return np.vstack([top, bottom]), np.concatenate([u, v])


def fit_h5(src, dst) -> np.ndarray:
    """Least-squares (a, b, c, d, e) from >= 3 correspondences, via QR.

    Raises :class:`DegenerateError` if the stacked system is rank deficient.
    """
    src = np.asarray(src, dtype=float).reshape(-1, 2)
    dst = np.asarray(dst, dtype=float).reshape(-1, 2)
    if len(src) != len(dst):
        raise ValueError("src and dst differ in length")
    if len(src) < 3:
        raise DegenerateError("5DOF fit needs at least 3 correspondences")
    A, rhs = h5_design(src, dst)
    # Column scaling keeps the rank test meaningful for pixel-sized values.
    scale = np.linalg.norm(A, axis=0)
    if np.any(scale == 0):
        raise DegenerateError("5DOF design matrix has an empty column")
    As = A / scale
    Q, R = np.linalg.qr(As)
    diag = np.abs(np.diag(R))
    if diag.min() <= RANK_TOL * diag.max():
        raise DegenerateError("5DOF design matrix is rank deficient")
    coef = np.linalg.solve(R, Q.T @ rhs)
    return coef / scale


def h5_to_matrix(coeffs) -> np.ndarray:
    a, b, c, d, e = (float(v) for v in coeffs)
    return np.array([[a, 0.0, b], [0.0, c, d], [e, 0.0, 1.0]])


def matrix_to_h5(H: np.ndarray) -> np.ndarray:
    H = np.asarray(H, dtype=float) / H[2, 2]
    return np.array([H[0, 0], H[0, 2], H[1, 1], H[1, 2], H[2, 0]])


def _normalizer(pts: np.ndarray) -> np.ndarray:
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2) / d if d > 0 else 1.0
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def fit_h8(src, dst) -> np.ndarray:
    """Normalized DLT from >= 4 correspondences; H scaled so ``H[2,2] == 1``."""
    src = np.asarray(src, dtype=float).reshape(-1, 2)
    dst = np.asarray(dst, dtype=float).reshape(-1, 2)
    if len(src) < 4:
        raise DegenerateError("8DOF fit needs at least 4 correspondences")
    Ts, Td = _normalizer(src), _normalizer(dst)
    s = src @ Ts[:2, :2].T + Ts[:2, 2]
    d = dst @ Td[:2, :2].T + Td[:2, 2]
    x, y, u, v = s[:, 0], s[:, 1], d[:, 0], d[:, 1]
    n = len(x)
    zero, one = np.zeros(n), np.ones(n)
    A = np.empty((2 * n, 9))
    A[0::2] = np.column_stack([x, y, one, zero, zero, zero, -u * x, -u * y, -u])
    A[1::2] = np.column_stack([zero, zero, zero, x, y, one, -v * x, -v * y, -v])
    if len(A) < 9:
        A = np.vstack([A, np.zeros((9 - len(A), 9))])
    _, sv, Vt = np.linalg.svd(A, full_matrices=False)
    if n == 4 and sv[7] <= RANK_TOL * sv[0]:
        raise DegenerateError("8DOF sample is degenerate")
    Hn = Vt[-1].reshape(3, 3)
    H = np.linalg.inv(Td) @ Hn @ Ts
    if abs(H[2, 2]) <= 1e-12 * np.abs(H).max():
        raise DegenerateError("8DOF solution has H[2,2] == 0")
    H = H / H[2, 2]
    if abs(np.linalg.det(H)) <= 1e-12:
        raise DegenerateError("8DOF solution is singular")
    return H


def _has_collinear_triple(p: np.ndarray, tol: float = 1e-3) -> bool:
    # Area test relative to the sample's extent.
    ext = max(np.ptp(p[:, 0]), np.ptp(p[:, 1]), 1e-12)
    for i, j, k in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        a = p[j] - p[i]
        b = p[k] - p[i]
        if abs(a[0] * b[1] - a[1] * b[0]) <= tol * ext * ext:
            return True
    return False


def reprojection_errors(H: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    w = warp_points(H, src)
    err = np.sqrt(np.sum((w - dst) ** 2, axis=1))
    return np.where(np.isfinite(err), err, np.inf)


def _finish(H, dof, src, dst, idx_pairs, inlier_px) -> Homography:
    err = reprojection_errors(H, src, dst)
    inl = err <= inlier_px
    pts = src[inl]
    sigma = pts.std(axis=0) if len(pts) else np.zeros(2)
    rmse = float(np.sqrt(np.mean(err[inl] ** 2))) if inl.any() else 0.0
    return Homography(H=H, dof=dof, inliers=idx_pairs[inl], sigma_xy=sigma, rmse=rmse)


def _ransac(fit, sample_size, dof, src, dst, idx_pairs, inlier_px, confidence, max_iters, seed, sample_ok):
    src = np.asarray(src, dtype=float).reshape(-1, 2)
    dst = np.asarray(dst, dtype=float).reshape(-1, 2)
    n = len(src)
    if idx_pairs is None:
        idx_pairs = np.column_stack([np.arange(n), np.arange(n)])
    idx_pairs = np.asarray(idx_pairs, dtype=np.int64).reshape(n, 2)
    if n < sample_size:
        raise DegenerateError(f"need at least {sample_size} correspondences, got {n}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    best_count, best_H = 0, None
    needed, it = max_iters, 0
    while it < min(needed, max_iters):
        it += 1
        sample = rng.choice(n, size=sample_size, replace=False)
        if sample_ok is not None and not (sample_ok(src[sample]) and sample_ok(dst[sample])):
            continue
        try:
            H = fit(src[sample], dst[sample])
        except (DegenerateError, np.linalg.LinAlgError):
            continue
        count = int(np.count_nonzero(reprojection_errors(H, src, dst) <= inlier_px))
        if count > best_count:
            best_count, best_H = count, H
            needed = adaptive_iterations(count / n, sample_size, confidence, max_iters)

    if best_H is None or best_count < sample_size:
        raise DegenerateError(f"no {dof}DOF model reached {sample_size} inliers")

    # Refit on the consensus set until support stops growing.
    inl = reprojection_errors(best_H, src, dst) <= inlier_px
    for _ in range(5):
        try:
            H2 = fit(src[inl], dst[inl])
        except (DegenerateError, np.linalg.LinAlgError):
            break
        inl2 = reprojection_errors(H2, src, dst) <= inlier_px
        if inl2.sum() < inl.sum():
            break
        grew = inl2.sum() > inl.sum() or not np.array_equal(inl2, inl)
        best_H, inl = H2, inl2
        if not grew:
            break
    return _finish(best_H, dof, src, dst, idx_pairs, inlier_px)


def ransac_h5(
    src,
    dst,
    idx_pairs=None,
    inlier_px: float = 3.0,
    confidence: float = 0.999,
    max_iters: int = 2000,
    seed=0,
) -> Homography:
    """Robust 5DOF homography mapping ``src`` pixels onto ``dst`` pixels."""

    def fit(s, d):
        return h5_to_matrix(fit_h5(s, d))

    return _ransac(fit, 3, 5, src, dst, idx_pairs, inlier_px, confidence, max_iters, seed, None)


def ransac_h8(
    src,
    dst,
    idx_pairs=None,
    inlier_px: float = 3.0,
    confidence: float = 0.999,
    max_iters: int = 2000,
    seed=0,
) -> Homography:
    """Robust 8DOF homography: 4-point DLT hypotheses, all-inlier DLT refit."""

    def ok(p):
        return not _has_collinear_triple(p)

    return _ransac(fit_h8, 4, 8, src, dst, idx_pairs, inlier_px, confidence, max_iters, seed, ok)
