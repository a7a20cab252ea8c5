"""Per-point frames that rotate the canonical cone directions.

``ri_xy`` frames spin about the z axis so the first canonical axis points at
the densest azimuth of the point's neighbourhood; ``ri_xyz`` frames are built
from the direction to the object centre and the direction to the local
neighbourhood centre, which makes them equivariant under any rotation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import DirectionSet, KnnIndex, PointCloud, centroid

ALIGNMENT_MODES = ("none", "ri_xy", "ri_xyz")
PIVOT_NEIGHBORS = 32
# Width of the azimuth window used to find the densest direction.
AZIMUTH_WINDOW = np.radians(10.0)
XY_EPS = 1e-9
CROSS_EPS = 1e-9


@dataclass(frozen=True)
class Frame:
    rotation: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        check_frame(self.rotation)


def check_frame(rotation, tol=1e-9):
    r = np.asarray(rotation, dtype=np.float64)
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        raise ValueError("frame must be a finite 3x3 matrix")
    if np.abs(r.T @ r - np.eye(3)).max() > tol or abs(np.linalg.det(r) - 1.0) > tol:
        raise ValueError("frame must be a proper rotation (orthonormal, det +1)")
    return r


def z_rotation(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotate_directions(directions, rotation):
    """``R @ v`` for each row ``v``; written out so it rounds like the oracle."""
    v = np.asarray(directions, dtype=np.float64)
    r = np.asarray(rotation, dtype=np.float64)
    out = np.empty(r.shape[:-2] + v.shape, dtype=np.float64)
    rr = r[..., None, :, :]
    for a in range(3):
        out[..., a] = rr[..., a, 0] * v[:, 0] + rr[..., a, 1] * v[:, 1] + rr[..., a, 2] * v[:, 2]
    return out


def apply_frame(direction_set: DirectionSet, frame: Frame) -> np.ndarray:
    return rotate_directions(direction_set.directions, frame.rotation)


# -- RI-XY --------------------------------------------------------------------

def _densest_azimuth(offsets_xy):
    """Densest azimuth of a batch of planar offset sets.

    ``offsets_xy`` has shape ``(P, K, 2)``.  Each offset proposes a window of
    ±5° around its own azimuth; the window holding the most offsets wins,
    ties going to the nearest proposing neighbour.  The pivot is the
    normalised sum of the offsets inside the winning window.  Everything is
    expressed through azimuth differences, so rotating all offsets about z
    rotates the pivot by the same angle.
    """
    norm = np.hypot(offsets_xy[..., 0], offsets_xy[..., 1])
    valid = norm >= XY_EPS
    phi = np.arctan2(offsets_xy[..., 1], offsets_xy[..., 0])
    diff = phi[:, None, :] - phi[:, :, None]
    diff = np.abs(np.remainder(diff + np.pi, 2 * np.pi) - np.pi)
    inside = (diff <= AZIMUTH_WINDOW / 2) & valid[:, None, :] & valid[:, :, None]
    counts = inside.sum(axis=2)
    winner = np.argmax(counts, axis=1)
    members = inside[np.arange(len(winner)), winner]
    pivot = (offsets_xy * members[..., None]).sum(axis=1)
    ok = valid.any(axis=1)
    pivot_norm = np.hypot(pivot[:, 0], pivot[:, 1])
    ok &= pivot_norm > 0
    pivot = np.where(ok[:, None], pivot / np.where(ok, pivot_norm, 1.0)[:, None], [1.0, 0.0])
    return pivot, ~ok


def _xy_rotations(pivot):
    c, s = pivot[:, 0], pivot[:, 1]
    rot = np.zeros((len(pivot), 3, 3))
    rot[:, 0, 0], rot[:, 0, 1] = c, -s
    rot[:, 1, 0], rot[:, 1, 1] = s, c
    rot[:, 2, 2] = 1.0
    return rot


def pivot_ri_xy(cloud: PointCloud, index: KnnIndex, point_index: int, k=PIVOT_NEIGHBORS) -> Frame:
    nl = index.query(point_index, k)
    off = cloud.points[nl.indices] - cloud.points[point_index]
    pivot, bad = _densest_azimuth(off[None, :, :2])
    return Frame(_xy_rotations(pivot)[0], bool(bad[0]))


def ri_xy_frames(points, index: KnnIndex, k=PIVOT_NEIGHBORS):
    nbr, _ = index.query_all(k)
    off = points[nbr] - points[:, None, :]
    pivot, bad = _densest_azimuth(off[..., :2])
    return _xy_rotations(pivot), bad


# -- RI-XYZ -------------------------------------------------------------------

def _xyz_frames(x, c_object, c_local):
    n = len(x)
    flags = np.zeros(n, dtype=bool)
    p1 = c_object - x
    n1 = np.linalg.norm(p1, axis=1)
    bad1 = n1 < CROSS_EPS
    p1 = np.where(bad1[:, None], [0.0, 0.0, 1.0], p1 / np.where(bad1, 1.0, n1)[:, None])
    flags |= bad1

    cr = np.cross(p1, c_local - x)
    ncr = np.linalg.norm(cr, axis=1)
    bad2 = ncr < CROSS_EPS
    p2 = cr / np.where(bad2, 1.0, ncr)[:, None]
    for i in np.flatnonzero(bad2):
        for axis in (np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])):
            w = axis - np.dot(axis, p1[i]) * p1[i]
            if np.linalg.norm(w) >= CROSS_EPS:
                p2[i] = w / np.linalg.norm(w)
                break
    flags |= bad2
    p3 = np.cross(p1, p2)
    return np.stack([p1, p2, p3], axis=-1), flags


def pivot_ri_xyz(cloud: PointCloud, index: KnnIndex, point_index: int, k=PIVOT_NEIGHBORS) -> Frame:
    nl = index.query(point_index, k)
    x = cloud.points[point_index][None]
    c_local = cloud.points[nl.indices].mean(axis=0)[None]
    c_object = centroid(cloud.points)[None]
    rot, bad = _xyz_frames(x, c_object, c_local)
    return Frame(rot[0], bool(bad[0]))


def ri_xyz_frames(points, index: KnnIndex, k=PIVOT_NEIGHBORS):
    nbr, _ = index.query_all(k)
    c_local = points[nbr].mean(axis=1)
    c_object = centroid(points)[None]
    return _xyz_frames(points, c_object, c_local)


def compute_frames(points, index: KnnIndex, mode: str, k=PIVOT_NEIGHBORS):
    """Frames ``(N, 3, 3)`` and a degeneracy flag per point for ``mode``."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if mode == "none":
        return np.broadcast_to(np.eye(3), (n, 3, 3)).copy(), np.zeros(n, dtype=bool)
    if n <= k:
        raise ValueError(f"{mode} alignment needs more than {k} points, got {n}")
    if mode == "ri_xy":
        return ri_xy_frames(points, index, k)
    if mode == "ri_xyz":
        return ri_xyz_frames(points, index, k)
    raise ValueError(f"unknown alignment mode {mode!r}; expected one of {ALIGNMENT_MODES}")
