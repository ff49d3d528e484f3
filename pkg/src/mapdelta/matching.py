"""Descriptor matching: k-NN, Lowe ratio test, mutual check, epipolar filtering."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Match:
    idx_a: int
    idx_b: int
    dist: float
    ratio: float


@dataclass(eq=False)
class Matches:
    """Struct-of-arrays list of :class:`Match`."""

    idx_a: np.ndarray
    idx_b: np.ndarray
    dist: np.ndarray
    ratio: np.ndarray

    def __post_init__(self):
        self.idx_a = np.asarray(self.idx_a, dtype=np.int64).reshape(-1)
        self.idx_b = np.asarray(self.idx_b, dtype=np.int64).reshape(-1)
        self.dist = np.asarray(self.dist, dtype=float).reshape(-1)
        self.ratio = np.asarray(self.ratio, dtype=float).reshape(-1)

    @classmethod
    def empty(cls) -> "Matches":
        return cls(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0))

    def __len__(self) -> int:
        return len(self.idx_a)

    def __getitem__(self, i: int) -> Match:
        return Match(int(self.idx_a[i]), int(self.idx_b[i]), float(self.dist[i]), float(self.ratio[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def take(self, keep) -> "Matches":
        return Matches(self.idx_a[keep], self.idx_b[keep], self.dist[keep], self.ratio[keep])

    def swapped(self) -> "Matches":
        return Matches(self.idx_b, self.idx_a, self.dist, self.ratio)

    def pairs(self) -> set[tuple[int, int]]:
        return set(zip(self.idx_a.tolist(), self.idx_b.tolist()))


@dataclass(eq=False)
class KnnResult:
    """``idx[i, r]`` is the r-th nearest B feature of A feature i; ``dist`` matches."""

    idx: np.ndarray
    dist: np.ndarray

    @property
    def k(self) -> int:
        return self.idx.shape[1]

    def best(self) -> Matches:
        n = len(self.idx)
        if self.k > 1:
            ratio = _ratio(self.dist[:, 0], self.dist[:, 1])
        else:
            ratio = np.ones(n)
        return Matches(np.arange(n), self.idx[:, 0], self.dist[:, 0], ratio)


def _ratio(best: np.ndarray, second: np.ndarray) -> np.ndarray:
    # best == second == 0 gives ratio 1, never 0/0.
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(second > 0, best / np.where(second > 0, second, 1.0), 1.0)
    return r


def knn_match(desc_a: np.ndarray, desc_b: np.ndarray, k: int = 2, chunk: int = 1024) -> KnnResult:
    """Exact L2 k-nearest neighbors of every row of ``desc_a`` among rows of ``desc_b``.

    Ties are broken toward the lower index in B.
    """
    a = np.asarray(desc_a, dtype=np.float64)
    b = np.asarray(desc_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"descriptor length mismatch: {a.shape} vs {b.shape}")
    if len(b) < k:
        raise ValueError(f"need at least {k} features in B, got {len(b)}")
    if not len(a):
        return KnnResult(np.zeros((0, k), dtype=np.int64), np.zeros((0, k)))
    # Shortlist with the expanded-square formula, then rank on exact distances.
    m = min(len(b), k + 4)
    b2 = np.einsum("ij,ij->i", b, b)
    idx_out = np.empty((len(a), k), dtype=np.int64)
    dist_out = np.empty((len(a), k))
    for s in range(0, len(a), chunk):
        ac = a[s : s + chunk]
        d2 = b2[None, :] - 2.0 * ac @ b.T
        if m < len(b):
            cand = np.argpartition(d2, m - 1, axis=1)[:, :m]
        else:
            cand = np.broadcast_to(np.arange(len(b)), (len(ac), len(b)))
        exact = np.sqrt(np.sum((ac[:, None, :] - b[cand]) ** 2, axis=2))
        order = np.lexsort((cand, exact), axis=1)[:, :k]
        idx_c = np.take_along_axis(cand, order, axis=1)
        dist_c = np.take_along_axis(exact, order, axis=1)
        if m < len(b):
            # Rows with more near-ties than the shortlist holds are ranked exactly.
            kth = np.take_along_axis(d2, idx_c[:, -1:], axis=1)
            slack = 1e-9 * (np.abs(kth) + b2.max() + 1.0)
            crowded = np.flatnonzero(np.count_nonzero(d2 <= kth + slack, axis=1) > m)
            for r in crowded:
                full = np.sqrt(np.sum((ac[r] - b) ** 2, axis=1))
                o = np.lexsort((np.arange(len(b)), full))[:k]
                idx_c[r], dist_c[r] = o, full[o]
        idx_out[s : s + chunk] = idx_c
        dist_out[s : s + chunk] = dist_c
    return KnnResult(idx_out, dist_out)


def lowe_filter(knn: KnnResult, ratio_max: float = 0.8) -> Matches:
    if knn.k < 2:
        raise ValueError("the ratio test needs k >= 2")
    m = knn.best()
    return m.take(m.ratio <= ratio_max)


def bidirectional_filter(ab: Matches, ba: Matches) -> Matches:
    """Keep A->B matches whose reverse B->A match is also present."""
    if not len(ab) or not len(ba):
        return Matches.empty()
    reverse = ba.pairs()
    keep = np.array([(b, a) in reverse for a, b in zip(ab.idx_a.tolist(), ab.idx_b.tolist())], dtype=bool)
    return ab.take(keep)


# -- epipolar geometry -------------------------------------------------------


def _normalize(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2) / d if d > 0 else 1.0
    T = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1]])
    return (pts - c) * s, T


def fundamental_8point(pa: np.ndarray, pb: np.ndarray) -> np.ndarray | None:
    """Normalized eight-point estimate of F with ``pb^T F pa = 0``; rank 2 enforced."""
    na, Ta = _normalize(pa)
    nb, Tb = _normalize(pb)
    x, y = na[:, 0], na[:, 1]
    u, v = nb[:, 0], nb[:, 1]
    A = np.column_stack([u * x, u * y, u, v * x, v * y, v, x, y, np.ones(len(x))])
    # Planar (rank-deficient) samples still give an F consistent with the sample.
    if len(A) < 9:
        A = np.vstack([A, np.zeros((9 - len(A), 9))])
    Vt = np.linalg.svd(A, full_matrices=False)[2]
    F = Vt[-1].reshape(3, 3)
    U, S, Vt2 = np.linalg.svd(F)
    S[2] = 0.0
    F = U @ np.diag(S) @ Vt2
    F = Tb.T @ F @ Ta
    norm = np.linalg.norm(F)
    if not np.isfinite(norm) or norm == 0:
        return None
    return F / norm


def sampson_distance(F: np.ndarray, pa: np.ndarray, pb: np.ndarray) -> np.ndarray:
    """First-order geometric distance (pixels) of each correspondence to F."""
    ha = np.column_stack([pa, np.ones(len(pa))])
    hb = np.column_stack([pb, np.ones(len(pb))])
    Fa = ha @ F.T
    Ftb = hb @ F
    num = np.einsum("ij,ij->i", hb, Fa) ** 2
    den = Fa[:, 0] ** 2 + Fa[:, 1] ** 2 + Ftb[:, 0] ** 2 + Ftb[:, 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        d2 = np.where(den > 0, num / den, np.inf)
    return np.sqrt(d2)


def _collinear(pts: np.ndarray, tol: float = 1e-6) -> bool:
    c = pts - pts.mean(axis=0)
    s = np.linalg.svd(c, compute_uv=False)
    return len(s) < 2 or s[1] <= tol * max(s[0], 1.0)


def adaptive_iterations(inlier_frac: float, sample_size: int, confidence: float, cap: int) -> int:
    if inlier_frac <= 0:
        return cap
    p_good = inlier_frac**sample_size
    if p_good >= 1.0:
        return 1
    n = np.log(1.0 - confidence) / np.log(1.0 - p_good)
    return int(min(cap, max(1, np.ceil(n))))


@dataclass
class EpipolarResult:
    matches: Matches
    F: np.ndarray | None
    degenerate: bool = False


def epipolar_filter(
    matches: Matches,
    px_a: np.ndarray,
    px_b: np.ndarray,
    threshold_px: float = 3.0,
    confidence: float = 0.999,
    max_iters: int = 2000,
    seed: int | np.random.Generator | None = 0,
) -> EpipolarResult:
    """Keep matches consistent with a RANSAC-estimated fundamental matrix.

    Fewer than eight matches pass through unchanged; collinear point sets pass
    through with ``degenerate`` set.
    """
    n = len(matches)
    if n < 8:
        return EpipolarResult(matches, None)
    pa = np.asarray(px_a, dtype=float)[matches.idx_a]
    pb = np.asarray(px_b, dtype=float)[matches.idx_b]
    if _collinear(pa) or _collinear(pb):
        log.warning("epipolar filter: collinear correspondences, skipping")
        return EpipolarResult(matches, None, degenerate=True)
    rng = np.random.default_rng(seed)
    best_count, best_F = -1, None
    needed = max_iters
    it = 0
    while it < min(needed, max_iters):
        it += 1
        sample = rng.choice(n, size=8, replace=False)
        F = fundamental_8point(pa[sample], pb[sample])
        if F is None:
            continue
        count = int(np.count_nonzero(sampson_distance(F, pa, pb) <= threshold_px))
        if count > best_count:
            best_count, best_F = count, F
            needed = adaptive_iterations(count / n, 8, confidence, max_iters)
    if best_F is None:
        return EpipolarResult(matches, None, degenerate=True)
    keep = sampson_distance(best_F, pa, pb) <= threshold_px
    # One refit on the consensus set; kept only if it does not lose support.
    if keep.sum() >= 8:
        F2 = fundamental_8point(pa[keep], pb[keep])
        if F2 is not None:
            keep2 = sampson_distance(F2, pa, pb) <= threshold_px
            if keep2.sum() >= keep.sum():
                best_F, keep = F2, keep2
    return EpipolarResult(matches.take(keep), best_F)
