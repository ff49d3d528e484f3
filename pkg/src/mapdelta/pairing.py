"""Geometric query-map image pair selection.

A query and a map image are compared only when their camera centers are close
and their lines of sight nearly parallel, which keeps parallax small enough for
a single homography to relate the two views.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .grid import radius_pairs
from .model import ImageRecord

DEFAULT_MAX_DIST = 1.0
DEFAULT_MAX_ANG = 0.2


@dataclass(frozen=True)
class PairCandidate:
    query_id: str
    map_id: str
    center_dist: float
    angular_sep: float

    def __post_init__(self):
        if not self.center_dist >= 0:
            raise ValueError("center_dist must be non-negative")
        if not 0 <= self.angular_sep <= np.pi:
            raise ValueError("angular_sep must lie in [0, pi]")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "PairCandidate":
        return cls(doc["query_id"], doc["map_id"], float(doc["center_dist"]), float(doc["angular_sep"]))


def angular_separation(a, b, tol: float = 1e-6) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if abs(np.linalg.norm(a) - 1) > tol or abs(np.linalg.norm(b) - 1) > tol:
        raise ValueError("angular_separation expects unit vectors")
    return float(np.arccos(np.clip(np.dot(a, b), -1.0, 1.0)))


def _angles(los_q: np.ndarray, los_m: np.ndarray) -> np.ndarray:
    # Same arithmetic as angular_separation, vectorized over rows.
    dots = np.einsum("ij,ij->i", los_q, los_m)
    return np.arccos(np.clip(dots, -1.0, 1.0))


def select_pairs(
    queries: list[ImageRecord],
    maps: list[ImageRecord],
    max_dist: float = DEFAULT_MAX_DIST,
    max_ang: float = DEFAULT_MAX_ANG,
    use_grid: bool = False,
) -> list[PairCandidate]:
    """Every (query, map) pair within ``max_dist`` meters and ``max_ang`` radians.

    The default is an exhaustive scan. ``use_grid`` buckets map centers on a
    uniform grid first; the result is identical.
    """
    if not queries or not maps:
        return []
    qpos = np.array([q.pose.position for q in queries])
    mpos = np.array([m.pose.position for m in maps])
    qlos = np.array([q.pose.los for q in queries])
    mlos = np.array([m.pose.los for m in maps])

    if use_grid and max_dist > 0:
        qi, mj = radius_pairs(qpos, mpos, max_dist)
    else:
        qi, mj = np.meshgrid(np.arange(len(queries)), np.arange(len(maps)), indexing="ij")
        qi, mj = qi.ravel(), mj.ravel()
    dists = np.sqrt(np.sum((qpos[qi] - mpos[mj]) ** 2, axis=1))
    angs = _angles(qlos[qi], mlos[mj])
    keep = (dists <= max_dist) & (angs <= max_ang)

    out = [
        PairCandidate(queries[i].id, maps[j].id, float(d), float(a))
        for i, j, d, a in zip(qi[keep], mj[keep], dists[keep], angs[keep])
    ]
    out.sort(key=lambda p: (p.query_id, p.center_dist, p.map_id))
    return out
