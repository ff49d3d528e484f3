"""Uniform-grid bucketing for fixed-radius neighbor queries in 2-D and 3-D.

Cells are ``radius`` wide, so every neighbor of a query point lies in the
3**d block of cells around it. All queries are vectorized over the query set.
"""

from __future__ import annotations

import itertools

import numpy as np


class UniformGrid:
    def __init__(self, points: np.ndarray, cell: float):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2:
            raise ValueError("points must be an (n, d) array")
        if not cell > 0:
            raise ValueError("cell size must be positive")
        self.points = pts
        self.cell = float(cell)
        self.dim = pts.shape[1]
        self._cells = np.floor(pts / self.cell).astype(np.int64)
        if len(pts):
            self._lo = self._cells.min(axis=0) - 1
            self._span = self._cells.max(axis=0) - self._lo + 2
        else:
            self._lo = np.zeros(self.dim, dtype=np.int64)
            self._span = np.ones(self.dim, dtype=np.int64)
        keys = self._encode(self._cells)
        self._order = np.argsort(keys, kind="stable")
        self._sorted_keys = keys[self._order]

    def _encode(self, cells: np.ndarray) -> np.ndarray:
        # Out-of-range cells map to -1 so they never match a stored key.
        rel = cells - self._lo
        ok = np.all((rel >= 0) & (rel < self._span), axis=1)
        key = np.zeros(len(cells), dtype=np.int64)
        for k in range(self.dim):
            key = key * self._span[k] + rel[:, k]
        return np.where(ok, key, -1)

    def pairs_within(self, queries: np.ndarray, radius: float | None = None) -> tuple[np.ndarray, np.ndarray]:
        """All (query index, point index) pairs with distance <= radius.

        Sorted by query index, then point index.
        """
        r = self.cell if radius is None else float(radius)
        if r > self.cell:
            raise ValueError("radius may not exceed the grid cell size")
        q = np.asarray(queries, dtype=float).reshape(-1, self.dim)
        if not len(q) or not len(self.points):
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty
        qcells = np.floor(q / self.cell).astype(np.int64)
        qi_parts, pj_parts = [], []
        for off in itertools.product((-1, 0, 1), repeat=self.dim):
            keys = self._encode(qcells + np.array(off, dtype=np.int64))
            lo = np.searchsorted(self._sorted_keys, keys, side="left")
            hi = np.searchsorted(self._sorted_keys, keys, side="right")
            hi = np.where(keys < 0, lo, hi)
            counts = hi - lo
            total = int(counts.sum())
            if not total:
                continue
            qi = np.repeat(np.arange(len(q)), counts)
            starts = np.repeat(lo - np.cumsum(counts) + counts, counts)
            pj = self._order[starts + np.arange(total)]
            qi_parts.append(qi)
            pj_parts.append(pj)
        if not qi_parts:
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty
        qi = np.concatenate(qi_parts)
        pj = np.concatenate(pj_parts)
        d2 = np.sum((q[qi] - self.points[pj]) ** 2, axis=1)
        keep = d2 <= r * r
        qi, pj = qi[keep], pj[keep]
        order = np.lexsort((pj, qi))
        return qi[order], pj[order]


def pairs_within_naive(queries: np.ndarray, points: np.ndarray, radius: float) -> tuple[np.ndarray, np.ndarray]:
    q = np.asarray(queries, dtype=float)
    p = np.asarray(points, dtype=float)
    if not len(q) or not len(p):
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    d2 = np.sum((q[:, None, :] - p[None, :, :]) ** 2, axis=2)
    qi, pj = np.nonzero(d2 <= radius * radius)
    return qi.astype(np.int64), pj.astype(np.int64)


def radius_pairs(queries: np.ndarray, points: np.ndarray, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Grid-accelerated (query, point) index pairs within ``radius``."""
    if radius <= 0:
        empty = np.zeros(0, dtype=np.int64)
        if radius == 0:
            return pairs_within_naive(queries, points, 0.0)
        return empty, empty
    return UniformGrid(points, radius).pairs_within(queries, radius)
