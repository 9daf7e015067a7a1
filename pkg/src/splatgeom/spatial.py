"""Exact k-nearest-neighbor queries backed by scipy's cKDTree."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .types import PointCloud

# Extra candidates requested from the tree so that ties at the k-th
# distance can be re-sorted by index without a second query.
_TIE_SLACK = 4


@dataclass(frozen=True)
class NeighborList:
    indices: np.ndarray
    distances: np.ndarray

    def __len__(self):
        return len(self.indices)


class SpatialIndex:
    """Immutable k-NN index over a fixed set of positions.

    Neighbors exclude the query point itself and are ordered by
    ascending distance, ties broken by ascending point index.
    """

    def __init__(self, positions: np.ndarray, workers: int = 1):
        positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        if len(positions) == 0:
            raise ValueError("cannot build a spatial index over an empty cloud")
        self.positions = positions.copy()
        self.positions.setflags(write=False)
        self.workers = workers
        self._tree = cKDTree(self.positions, balanced_tree=False, compact_nodes=False)

    def __len__(self):
        return len(self.positions)

    @property
    def tree(self) -> cKDTree:
        return self._tree

    def _check_id(self, i):
        if not (0 <= i < len(self)) or int(i) != i:
            raise IndexError(f"invalid point id {i}")

    def knn(self, i: int, k: int) -> NeighborList:
        """Exact ``k`` nearest neighbors of point ``i``, excluding itself."""
        self._check_id(i)
        if k < 1:
            raise ValueError("k must be >= 1")
        k = min(k, len(self) - 1)
        if k == 0:
            return NeighborList(np.zeros(0, dtype=np.int64), np.zeros(0))
        q = self.positions[i]
        d, idx = self._tree.query(q, k + 1)
        d, idx = np.atleast_1d(d), np.atleast_1d(idx)
        kth = np.sort(d[idx != i])[k - 1]
        # collect every point tied with the k-th distance, then sort exactly
        cand = np.array(self._tree.query_ball_point(q, kth * (1 + 1e-12) + 1e-300), dtype=np.int64)
        cand = cand[cand != i]
        dist = np.linalg.norm(self.positions[cand] - q, axis=1)
        order = np.lexsort((cand, dist))[:k]
        return NeighborList(cand[order], dist[order])

    def knn_all(self, k: int, chunk: int = 1 << 17) -> tuple[np.ndarray, np.ndarray]:
        """Batch k-NN for every point.

        Returns ``(distances, indices)`` of shape (N, k'), k' = min(k, N-1).
        Distances are recomputed from coordinates so they match a linear
        scan; ties within the fetched slack are ordered by index.
        """
        n = len(self)
        k = min(k, n - 1)
        if k <= 0:
            return np.zeros((n, 0)), np.zeros((n, 0), dtype=np.int64)
        kq = min(k + 1 + _TIE_SLACK, n)
        dist_out = np.empty((n, k))
        idx_out = np.empty((n, k), dtype=np.int64)
        for s in range(0, n, chunk):
            e = min(n, s + chunk)
            _, idx = self._tree.query(self.positions[s:e], kq, workers=self.workers)
            idx = idx.astype(np.int64)
            own = np.arange(s, e)[:, None]
            diff = self.positions[idx] - self.positions[s:e, None, :]
            dist = np.sqrt(np.einsum("nkd,nkd->nk", diff, diff))
            # push self to the end, then order by (distance, index)
            key = np.where(idx == own, np.inf, dist)
            order = np.lexsort((idx, key), axis=-1)[:, :k]
            idx_out[s:e] = np.take_along_axis(idx, order, axis=1)
            dist_out[s:e] = np.take_along_axis(dist, order, axis=1)
        return dist_out, idx_out

    def ball(self, i: int, r: float) -> np.ndarray:
        """Indices of points within distance ``r`` of point ``i`` (excluding i)."""
        self._check_id(i)
        cand = np.array(self._tree.query_ball_point(self.positions[i], r), dtype=np.int64)
        cand.sort()
        return cand[cand != i]


def build_index(cloud, workers: int = 1) -> SpatialIndex:
    """Build a :class:`SpatialIndex` from a PointCloud or an (N, 3) array."""
    pos = cloud.positions if isinstance(cloud, PointCloud) else cloud
    return SpatialIndex(pos, workers=workers)


def knn(index: SpatialIndex, i: int, k: int) -> NeighborList:
    return index.knn(i, k)
