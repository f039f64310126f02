"""Exact k-nearest-neighbor queries and atrous (strided) neighbor selection.

Neighborhoods are computed over the sampled points of one block. Distance
ties are broken by the lower point index everywhere, so results match a
brute-force sort exactly and are reproducible. The query point is always
excluded from its own neighborhood.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

__all__ = ["NeighborIndex", "AtrousNeighborhood", "build_index", "atrous_gather"]


@dataclass(frozen=True)
class AtrousNeighborhood:
    """K selected neighbor indices for one query point at stride D.

    Among the K*D nearest other points sorted by increasing distance
    (1-indexed), the selected indices are exactly ranks D, 2D, ..., K*D.
    When the index holds fewer than K*D other points, the sorted list is
    cyclically repeated to length K*D before selection.
    """

    query: int
    indices: np.ndarray
    distances: np.ndarray
    K: int
    D: int


class NeighborIndex:
    """Immutable exact k-NN index over an M x 3 position snapshot."""

    def __init__(self, positions: np.ndarray):
        positions = np.asarray(positions, dtype=np.float64)
        if positions.ndim != 2 or positions.shape[1] != 3:
            raise ValueError(f"positions must be M x 3, got {positions.shape}")
        if positions.shape[0] < 1:
            raise ValueError("need at least one point")
        if not np.all(np.isfinite(positions)):
            raise ValueError("positions contain non-finite coordinates")
        self.positions = positions.copy()
        self.positions.setflags(write=False)
        self._tree = cKDTree(self.positions)

    def __len__(self) -> int:
        return self.positions.shape[0]

    def _exact_row(self, q: int, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Exact k nearest others for one query via a tie-safe ball query."""
        m = len(self)
        take = min(k, m - 1)
        kq = min(m, k + 2)
        d, _ = self._tree.query(self.positions[q], k=kq)
        d = np.atleast_1d(d)
        # the ball boundary is ULP-fragile: points at exactly the cutoff
        # distance can fall either side, so grow the radius until the ball
        # holds enough candidates
        r = float(d[-1])
        while True:
            cand = np.asarray(self._tree.query_ball_point(self.positions[q], r=r), dtype=np.intp)
            cand = cand[cand != q]
            if cand.size >= take:
                break
            r = np.nextafter(r * (1.0 + 1e-12) + 1e-300, np.inf)
        cd = np.linalg.norm(self.positions[cand] - self.positions[q], axis=1)
        order = np.lexsort((cand, cd))
        return cand[order][:take], cd[order][:take]

    def nearest_others(self, query: int, k: int) -> tuple[np.ndarray, np.ndarray]:
        """The k nearest points other than ``query``, ties to lower index.

        Returns (indices, distances), distances non-decreasing. If fewer
        than k other points exist, returns all of them.
        """
        m = len(self)
        if not 0 <= query < m:
            raise ValueError(f"query index {query} out of range for {m} points")
        if k < 1:
            raise ValueError("k must be >= 1")
        return self._exact_row(query, min(k, m - 1))

    def nearest_others_all(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized nearest_others for every point; returns (M x k', M x k').

        k' = min(k, M-1). The bulk of rows comes from one batched tree
        query; rows with distance ties near the cutoff (or duplicate
        positions hiding the query point) are repaired exactly.
        """
        m = len(self)
        if k < 1:
            raise ValueError("k must be >= 1")
        keff = min(k, m - 1)
        if keff == 0:
            return (np.zeros((m, 0), dtype=np.intp), np.zeros((m, 0)))
        kq = min(m, keff + 2)
        dist, idx = self._tree.query(self.positions, k=kq)
        dist = dist.reshape(m, kq)
        idx = idx.reshape(m, kq)

        # order each row by (distance, index) with one global lexsort
        rows = np.repeat(np.arange(m), kq)
        order = np.lexsort((idx.ravel(), dist.ravel(), rows))
        idx = idx.ravel()[order].reshape(m, kq)
        dist = dist.ravel()[order].reshape(m, kq)

        out_idx = np.empty((m, keff), dtype=np.intp)
        out_dist = np.empty((m, keff))
        self_pos = idx == np.arange(m)[:, None]
        for i in range(m):
            row_i = idx[i]
            row_d = dist[i]
            hit = np.flatnonzero(self_pos[i])
            # needs exact repair if the query point never showed up (can
            # happen with many duplicates) or the cutoff distance is tied
            need_repair = hit.size == 0
            if not need_repair:
                others_i = np.delete(row_i, hit[0])
                others_d = np.delete(row_d, hit[0])
                if others_i.size > keff and others_d[keff - 1] == others_d[keff]:
                    need_repair = True
            if need_repair:
                out_idx[i], out_dist[i] = self._exact_row(i, keff)
            else:
                out_idx[i] = others_i[:keff]
                out_dist[i] = others_d[:keff]
        return out_idx, out_dist


def build_index(positions: np.ndarray) -> NeighborIndex:
    """Build an exact k-NN index; duplicate positions are permitted."""
    return NeighborIndex(positions)


def _strided(sorted_idx: np.ndarray, sorted_dist: np.ndarray, K: int, D: int,
             query: int) -> AtrousNeighborhood:
    need = K * D
    n = sorted_idx.size
    if n == 0:
        raise ValueError("no other points to select neighbors from")
    if n < need:
        reps = -(-need // n)
        sorted_idx = np.tile(sorted_idx, reps)[:need]
        sorted_dist = np.tile(sorted_dist, reps)[:need]
    sel = np.arange(D - 1, need, D)
    return AtrousNeighborhood(
        query=query,
        indices=sorted_idx[sel].copy(),
        distances=sorted_dist[sel].copy(),
        K=K,
        D=D,
    )


def atrous_gather(index: NeighborIndex, query: int, K: int, D: int) -> AtrousNeighborhood:
    """Select every D-th of the K*D nearest other points (1-indexed ranks)."""
    if K < 1 or D < 1:
        raise ValueError(f"K and D must be >= 1, got K={K}, D={D}")
    sorted_idx, sorted_dist = index.nearest_others(query, K * D)
    return _strided(sorted_idx, sorted_dist, K, D, query)


def atrous_gather_all(index: NeighborIndex, K: int, D: int,
                      sorted_idx: np.ndarray | None = None,
                      sorted_dist: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Strided neighbor indices for every point at once.

    Returns (M x K indices, M x K distances). Pass precomputed sorted
    neighbor lists (from ``nearest_others_all``) to share one sort across
    several strides; they must cover at least min(K*D, M-1) ranks.
    """
    if K < 1 or D < 1:
        raise ValueError(f"K and D must be >= 1, got K={K}, D={D}")
    m = len(index)
    if m < 2:
        raise ValueError("need at least two points for neighborhoods")
    need = K * D
    if sorted_idx is None:
        sorted_idx, sorted_dist = index.nearest_others_all(need)
    avail = sorted_idx.shape[1]
    if avail < min(need, m - 1):
        raise ValueError(f"precomputed neighbor lists cover {avail} ranks, need {min(need, m - 1)}")
    if avail < need:
        reps = -(-need // avail)
        sorted_idx = np.tile(sorted_idx, (1, reps))[:, :need]
        sorted_dist = np.tile(sorted_dist, (1, reps))[:, :need]
    sel = np.arange(D - 1, need, D)
    return sorted_idx[:, sel].copy(), sorted_dist[:, sel].copy()
