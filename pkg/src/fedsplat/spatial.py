"""Nearest-neighbour and fixed-radius queries over Gaussian centres."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree


class PointIndex:
    """Immutable k-d tree over a set of 3D points."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        self.points = pts.copy()
        self.points.setflags(write=False)
        self._tree = cKDTree(self.points) if len(pts) else None

    def __len__(self) -> int:
        return len(self.points)


def nearest_neighbor_distances(points) -> np.ndarray:
    """Distance from every point to its closest other point."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 2:
        raise ValueError("nearest-neighbour distances need at least two points")
    dist, _ = cKDTree(pts).query(pts, k=2)
    # column 0 is the point itself (or a coincident twin, distance 0 either way)
    return dist[:, 1]


def median_nn_distance(points) -> float:
    """Lower median of the nearest-neighbour distances."""
    d = np.sort(nearest_neighbor_distances(points))
    return float(d[(len(d) - 1) // 2])


def range_search(index: PointIndex, query_points, radius: float) -> np.ndarray:
    """Sorted indices of indexed points within `radius` (inclusive) of any query point."""
    if radius < 0:
        raise ValueError("radius must be non-negative")
    q = np.asarray(query_points, dtype=np.float64).reshape(-1, 3)
    if index._tree is None or len(q) == 0:
        return np.zeros(0, dtype=np.int64)
    hits = index._tree.query_ball_point(q, r=radius, return_sorted=False)
    if len(hits) == 0:
        return np.zeros(0, dtype=np.int64)
    flat = np.fromiter((i for h in hits for i in h), dtype=np.int64)
    return np.unique(flat)
