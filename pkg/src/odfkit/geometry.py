"""Point-cloud primitives, icosphere directions and exact k-nearest neighbours."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateCloudError

GOLDEN_RATIO = (1.0 + math.sqrt(5.0)) / 2.0


def pair_distances(origin, targets):
    """Euclidean distances from ``origin`` to each row of ``targets``.

    The sum is spelled out component by component so every caller (index,
    brute-force oracles, feature kernels) rounds identically.
    """
    d = np.asarray(targets, dtype=np.float64) - np.asarray(origin, dtype=np.float64)
    return np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2])


def centroid(points):
    """Mean of the rows, correctly rounded, so it ignores row order bit for bit."""
    points = np.asarray(points, dtype=np.float64)
    return np.array([math.fsum(col) for col in points.T]) / len(points)


@dataclass
class PointCloud:
    points: np.ndarray
    colors: Optional[np.ndarray] = None
    label: Optional[int] = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        self.points = pts
        if self.colors is not None:
            cols = np.array(self.colors, dtype=np.float64)
            if cols.shape != pts.shape:
                raise ValueError("colors must match points in length")
            if np.any(cols < 0.0) or np.any(cols > 1.0):
                raise ValueError("colors must lie in [0, 1]")
            self.colors = cols

    def __len__(self):
        return self.points.shape[0]

    def with_points(self, points) -> "PointCloud":
        return PointCloud(points, self.colors, self.label)

    def take(self, order) -> "PointCloud":
        order = np.asarray(order)
        colors = None if self.colors is None else self.colors[order]
        return PointCloud(self.points[order], colors, self.label)


def normalize_to_unit_sphere(cloud: PointCloud) -> PointCloud:
    """Center the cloud on its centroid and scale it so the farthest point has norm 1."""
    if len(cloud) == 0:
        raise DegenerateCloudError("cannot normalize an empty cloud")
    centered = cloud.points - centroid(cloud.points)
    radius = pair_distances(np.zeros(3), centered).max()
    if radius == 0.0 or not np.isfinite(radius):
        raise DegenerateCloudError("all points coincide; cloud has no extent")
    return cloud.with_points(centered / radius)


# -- directions ---------------------------------------------------------------

@dataclass(frozen=True)
class DirectionSet:
    level: int
    directions: np.ndarray = field(repr=False)

    def __len__(self):
        return self.directions.shape[0]


def icosahedron():
    """Unit icosahedron vertices ``(0, ±1, ±φ)`` and cyclic permutations, plus faces."""
    base = []
    for s1 in (-1.0, 1.0):
        for s2 in (-1.0, 1.0):
            base.append((0.0, s1, s2 * GOLDEN_RATIO))
    verts = []
    for shift in range(3):
        for v in base:
            verts.append(v[-shift:] + v[:-shift] if shift else v)
    verts = np.array(verts, dtype=np.float64)
    # Faces are the triples whose edges all have the icosahedron edge length 2.
    n = len(verts)
    adj = np.abs(np.linalg.norm(verts[:, None] - verts[None], axis=-1) - 2.0) < 1e-9
    faces = []
    for i in range(n):
        for j in range(i + 1, n):
            if not adj[i, j]:
                continue
            for k in range(j + 1, n):
                if adj[i, k] and adj[j, k]:
                    faces.append(_outward(verts, i, j, k))
    verts = verts / np.linalg.norm(verts, axis=1, keepdims=True)
    return verts, np.array(faces, dtype=np.int64)


def _outward(verts, i, j, k):
    a, b, c = verts[i], verts[j], verts[k]
    if np.dot(np.cross(b - a, c - a), a + b + c) < 0:
        return (i, k, j)
    return (i, j, k)


def _subdivide(verts, faces):
    verts = [tuple(v) for v in verts]
    cache = {}

    def midpoint(a, b):
        key = (a, b) if a < b else (b, a)
        if key not in cache:
            m = np.add(verts[a], verts[b]) * 0.5
            m = m / np.linalg.norm(m)
            cache[key] = len(verts)
            verts.append(tuple(m))
        return cache[key]

    new_faces = []
    for a, b, c in faces:
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
    return np.array(verts, dtype=np.float64), np.array(new_faces, dtype=np.int64)


def icosphere_directions(level: int) -> DirectionSet:
    """Vertices of the icosahedron after ``level`` midpoint subdivisions (12, 42 or 162)."""
    if level not in (0, 1, 2):
        raise ValueError(f"tessellation level must be 0, 1 or 2, got {level!r}")
    verts, faces = icosahedron()
    for _ in range(level):
        verts, faces = _subdivide(verts, faces)
    verts.setflags(write=False)
    return DirectionSet(level, verts)


# -- nearest neighbours -------------------------------------------------------

@dataclass(frozen=True)
class NeighborList:
    indices: np.ndarray
    distances: np.ndarray

    def __len__(self):
        return len(self.indices)


class KnnIndex:
    """Exact k-NN over a fixed cloud.

    Neighbours are ordered by distance, ties broken by the lower point
    index, and the query point itself is never returned (duplicates of it
    are, at distance 0).
    """

    _PAD = 4

    def __init__(self, points):
        pts = np.array(points, dtype=np.float64)
        pts.setflags(write=False)
        self.points = pts
        self._tree = cKDTree(pts)
        self._memo = None  # (k, idx, dist) of the largest query_all so far

    def __len__(self):
        return self.points.shape[0]

    def _check_k(self, k):
        if k < 1 or k >= len(self):
            raise ValueError(f"k must satisfy 1 <= k < {len(self)}, got {k}")

    def _exact_row(self, i, k):
        p = self.points[i]
        # Grow the ball until it holds k other points, then resolve ties exactly.
        _, cand = self._tree.query(p, k=min(k + 1 + self._PAD, len(self)))
        cand = np.asarray(cand)
        radius = pair_distances(p, self.points[cand]).max()
        cand = np.array(self._tree.query_ball_point(p, radius * (1 + 1e-9) + 1e-12), dtype=np.int64)
        cand = cand[cand != i]
        d = pair_distances(p, self.points[cand])
        order = np.lexsort((cand, d))[:k]
        return cand[order], d[order]

    def query(self, i: int, k: int) -> NeighborList:
        self._check_k(k)
        if not 0 <= i < len(self):
            raise IndexError(f"query index {i} out of range")
        idx, dist = self._exact_row(i, k)
        return NeighborList(idx, dist)

    def query_all(self, k: int):
        """Neighbour indices and distances for every point, shape ``(N, k)``.

        With ties broken by index the k-NN list is a prefix of the (k+1)-NN
        list, so the largest result computed so far serves smaller k.
        """
        self._check_k(k)
        memo = self._memo
        if memo is not None and memo[0] >= k:
            return memo[1][:, :k].copy(), memo[2][:, :k].copy()
        idx, dist = self._query_all(k)
        self._memo = (k, idx, dist)
        return idx.copy(), dist.copy()

    def _query_all(self, k):
        n = len(self)
        m = min(k + 1 + self._PAD, n)
        _, cand = self._tree.query(self.points, k=m)
        cand = np.asarray(cand, dtype=np.int64).reshape(n, m)
        dist = pair_distances(self.points[:, None, :], self.points[cand])
        # Self goes to the back so it is never selected.
        is_self = cand == np.arange(n)[:, None]
        key_d = np.where(is_self, np.inf, dist)
        order = np.lexsort((cand, key_d), axis=-1)
        cand = np.take_along_axis(cand, order, axis=1)
        dist = np.take_along_axis(key_d, order, axis=1)
        idx, out_d = cand[:, :k].copy(), dist[:, :k].copy()
        if m == n:
            return idx, out_d
        # Points the tree did not return are at least as far as the farthest
        # retrieved one; if that is not clearly beyond the k-th distance a tie
        # may be hiding outside the candidate set, so redo the row exactly.
        kth = out_d[:, k - 1]
        farthest = np.where(np.isinf(dist[:, k:]), -np.inf, dist[:, k:]).max(axis=1)
        suspect = ~(farthest > kth * (1 + 1e-9) + 1e-12)
        for i in np.flatnonzero(suspect):
            idx[i], out_d[i] = self._exact_row(i, k)
        return idx, out_d


def build_knn_index(cloud) -> KnnIndex:
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    if points.shape[0] < 2:
        raise DegenerateCloudError("a k-NN index needs at least 2 points")
    return KnnIndex(points)


def knn(index: KnnIndex, query_index: int, k: int) -> NeighborList:
    return index.query(query_index, k)
