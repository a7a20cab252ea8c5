"""Orientation distribution features: normalized point counts inside a bank of cones.

For a point ``x_i`` and a cone ``(v, alpha, n)`` the value is the number of
other points ``x_j`` with ``|x_j - x_i| < d_n`` and
``angle(x_j - x_i, v) < alpha``, divided by ``n``; ``d_n`` is the distance to
the n-th nearest neighbour.  Both inequalities are strict, so the n-th
neighbour itself never counts toward a rank-n cone.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .alignment import ALIGNMENT_MODES, PIVOT_NEIGHBORS, check_frame, compute_frames, rotate_directions
from .geometry import DirectionSet, KnnIndex, PointCloud, build_knn_index, pair_distances

DEFAULT_ALPHAS_DEG = (31.71, 60.0)
DEFAULT_RANKS = (8, 16, 24, 32)
# Cosines this close to the threshold are re-decided with arccos, exactly as the
# oracle does, so the fast path never disagrees with the literal formula.
_BOUNDARY_SLACK = 1e-12


class ConeSpec(NamedTuple):
    direction_id: int
    alpha: float
    neighbor_rank: int


@dataclass(frozen=True)
class ConeBank:
    direction_set: DirectionSet
    alphas: tuple
    ranks: tuple

    def __post_init__(self):
        alphas = tuple(float(a) for a in self.alphas)
        ranks = tuple(int(r) for r in self.ranks)
        if not alphas or not ranks:
            raise ValueError("a cone bank needs at least one alpha and one rank")
        if any(not 0.0 < a <= math.pi for a in alphas):
            raise ValueError("cone half-angles must lie in (0, pi]")
        if any(r < 1 for r in ranks):
            raise ValueError("neighbor ranks must be >= 1")
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "ranks", ranks)

    @property
    def n_directions(self):
        return len(self.direction_set)

    @property
    def n_scales(self):
        return len(self.alphas) * len(self.ranks)

    @property
    def n_cones(self):
        return self.n_directions * self.n_scales

    @property
    def max_rank(self):
        return max(self.ranks)

    def scales(self):
        """``(rank, alpha)`` pairs in layout order: ranks major, alphas minor."""
        return [(r, a) for r in self.ranks for a in self.alphas]

    def cones(self):
        return [ConeSpec(l, a, r) for l in range(self.n_directions) for r, a in self.scales()]


def default_cone_bank(direction_set: DirectionSet) -> ConeBank:
    return ConeBank(direction_set, tuple(math.radians(a) for a in DEFAULT_ALPHAS_DEG), DEFAULT_RANKS)


@dataclass
class ODFField:
    values: np.ndarray  # (points, directions, scales)
    alignment: str = "none"
    frames: Optional[np.ndarray] = field(default=None, repr=False)
    degenerate: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def shape(self):
        return self.values.shape


def _check_bank(n_points, bank):
    if bank.max_rank >= n_points:
        raise ValueError(f"largest neighbor rank {bank.max_rank} needs more than {n_points} points")


def _cone_counts(points, nbr, dist, rows, rot_dirs, bank):
    """Raw cone counts for ``rows``; returns ``(P, D, R, A)`` float64."""
    p = points[rows]
    off = points[nbr] - p[:, None, :]
    # dot[p, k, l] between neighbour offsets and the rotated directions
    dot = (off[:, :, None, 0] * rot_dirs[:, None, :, 0]
           + off[:, :, None, 1] * rot_dirs[:, None, :, 1]
           + off[:, :, None, 2] * rot_dirs[:, None, :, 2])
    vnorm = np.sqrt(rot_dirs[..., 0] * rot_dirs[..., 0] + rot_dirs[..., 1] * rot_dirs[..., 1]
                    + rot_dirs[..., 2] * rot_dirs[..., 2])
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.clip(dot / (dist[:, :, None] * vnorm[:, None, :]), -1.0, 1.0)
    nonzero = dist > 0.0

    ang = np.empty(cos.shape + (len(bank.alphas),), dtype=bool)
    for a, alpha in enumerate(bank.alphas):
        thr = math.cos(alpha)
        m = cos > thr
        near = np.abs(cos - thr) <= _BOUNDARY_SLACK
        if near.any():
            m[near] = np.arccos(cos[near]) < alpha
        ang[..., a] = m & nonzero[:, :, None]

    dn = dist[:, [r - 1 for r in bank.ranks]]
    inside = dist[:, :, None] < dn[:, None, :]  # (P, K, R)
    # counts[p, l, a, r] = sum_k ang[p, k, l, a] * inside[p, k, r]
    P, K, D, A = ang.shape
    lhs = ang.reshape(P, K, D * A).transpose(0, 2, 1).astype(np.float64)
    counts = np.matmul(lhs, inside.astype(np.float64)).reshape(P, D, A, len(bank.ranks))
    return counts.transpose(0, 1, 3, 2)


def _normalize(counts, bank, dtype):
    n = np.asarray(bank.ranks, dtype=np.float64)[None, None, :, None]
    out = counts / n
    return out.reshape(counts.shape[0], counts.shape[1], -1).astype(dtype)


def odf_point(cloud: PointCloud, index: KnnIndex, point_index: int, bank: ConeBank, frame=None):
    """ODF slice ``(directions, scales)`` for a single point, float64."""
    points = cloud.points
    _check_bank(len(points), bank)
    rot = np.eye(3) if frame is None else check_frame(getattr(frame, "rotation", frame))
    nl = index.query(point_index, bank.max_rank)
    rot_dirs = rotate_directions(bank.direction_set.directions, rot)[None]
    counts = _cone_counts(points, nl.indices[None], nl.distances[None], np.array([point_index]),
                          rot_dirs, bank)
    return _normalize(counts, bank, np.float64)[0]


def odf_brute_force(cloud: PointCloud, point_index: int, bank: ConeBank, frame=None):
    """Reference evaluation: every cone tested against every other point, no index."""
    points = cloud.points
    n = len(points)
    _check_bank(n, bank)
    rot = np.eye(3) if frame is None else check_frame(getattr(frame, "rotation", frame))
    xi = points[point_index]
    others = np.array([j for j in range(n) if j != point_index])
    dist = pair_distances(xi, points[others])
    off = points[others] - xi
    ranked = np.sort(dist)
    dirs = rotate_directions(bank.direction_set.directions, rot)
    out = np.zeros((bank.n_directions, bank.n_scales))
    for l, v in enumerate(dirs):
        vnorm = np.sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
        dot = off[:, 0] * v[0] + off[:, 1] * v[1] + off[:, 2] * v[2]
        with np.errstate(invalid="ignore", divide="ignore"):
            angle = np.arccos(np.clip(dot / (dist * vnorm), -1.0, 1.0))
        for s, (rank, alpha) in enumerate(bank.scales()):
            d_n = ranked[rank - 1]
            hit = (dist < d_n) & (angle < alpha) & (dist > 0.0)
            out[l, s] = np.count_nonzero(hit) / rank
    return out


def resolve_workers(workers=None):
    if workers is None:
        workers = int(os.environ.get("ODF_WORKERS", "1"))
    return max(1, int(workers))


def odf_cloud(cloud: PointCloud, bank: ConeBank, alignment_mode="none", *, workers=None,
              index: Optional[KnnIndex] = None, dtype=np.float32, chunk=128,
              pivot_neighbors=PIVOT_NEIGHBORS) -> ODFField:
    """ODF field for every point of ``cloud``.

    Points are split into fixed chunks handled by up to ``workers`` threads;
    each chunk writes only its own rows, so the result does not depend on the
    worker count.
    """
    if alignment_mode not in ALIGNMENT_MODES:
        raise ValueError(f"unknown alignment mode {alignment_mode!r}")
    points = cloud.points
    n = len(points)
    _check_bank(n, bank)
    index = index or build_knn_index(cloud)
    frames, degenerate = compute_frames(points, index, alignment_mode, pivot_neighbors)
    nbr, dist = index.query_all(bank.max_rank)
    out = np.empty((n, bank.n_directions, bank.n_scales), dtype=dtype)
    dirs = bank.direction_set.directions

    def run(start):
        rows = np.arange(start, min(start + chunk, n))
        rot_dirs = rotate_directions(dirs, frames[rows])
        counts = _cone_counts(points, nbr[rows], dist[rows], rows, rot_dirs, bank)
        out[rows] = _normalize(counts, bank, dtype)

    starts = range(0, n, chunk)
    workers = resolve_workers(workers)
    if workers == 1:
        for s in starts:
            run(s)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, starts))
    return ODFField(out, alignment_mode, frames, degenerate)
