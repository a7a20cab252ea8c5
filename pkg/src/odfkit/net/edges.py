"""Neighbourhood edge features for the edge blocks.

Standard edges carry ``x - x_i`` (point minus neighbour).  Rotation-invariant
edges replace it with five scalars per (point, neighbour):

    0  |x - x_i|
    1  |x - c|
    2  |x_i - c|
    3  angle at c between x - c and x_i - c
    4  angle at x between c - x and x_i - x

and add two per-point channels, ``|x - c|`` and the angle at ``x`` between
``c - x`` and ``c_local - x``, that join the pooled features.  ``c`` is the
cloud centroid and ``c_local`` the centroid of the point's neighbours.
"""

from __future__ import annotations

import numpy as np

from ..geometry import KnnIndex, PointCloud, centroid

ANGLE_EPS = 1e-12


def neighbor_graph(index: KnnIndex, k):
    nbr, _ = index.query_all(k)
    return nbr


def _norm(v):
    return np.sqrt((v * v).sum(axis=-1))


def safe_angle(u, v):
    """Angle between vectors; 0 (and flagged) where either has zero length."""
    nu, nv = _norm(u), _norm(v)
    bad = (nu < ANGLE_EPS) | (nv < ANGLE_EPS)
    denom = np.where(bad, 1.0, nu * nv)
    cos = np.clip((u * v).sum(axis=-1) / denom, -1.0, 1.0)
    return np.where(bad, 0.0, np.arccos(cos)), bad


def difference_channels(points, nbr):
    return points[:, None, :] - points[nbr]


def ri_edge_channels(points, nbr, center=None):
    """Five invariant scalars per edge, shape ``(N, k, 5)``, plus degeneracy flags."""
    points = np.asarray(points, dtype=np.float64)
    c = centroid(points) if center is None else np.asarray(center, dtype=np.float64)
    x = points[:, None, :]
    xn = points[nbr]
    ang_c, bad_c = safe_angle(x - c, xn - c)
    ang_x, bad_x = safe_angle(np.broadcast_to(c - x, xn.shape), xn - x)
    out = np.stack([
        _norm(x - xn),
        np.broadcast_to(_norm(x - c), nbr.shape),
        _norm(xn - c),
        ang_c,
        ang_x,
    ], axis=-1)
    return out, bad_c | bad_x


def ri_point_channels(points, nbr, center=None):
    """Per-point ``|x - c|`` and centre/local-centre angle, shape ``(N, 2)``."""
    points = np.asarray(points, dtype=np.float64)
    c = centroid(points) if center is None else np.asarray(center, dtype=np.float64)
    c_local = points[nbr].mean(axis=1)
    ang, bad = safe_angle(c - points, c_local - points)
    return np.stack([_norm(points - c), ang], axis=-1), bad


def edge_features(cloud: PointCloud, point_feats, index: KnnIndex, k=32):
    """Explicit ``(N, k, 2F + 3)`` tensor ``[f_x, f_neighbor, x - x_i]``."""
    points = cloud.points
    if k >= len(points):
        raise ValueError(f"k={k} needs more than {len(points)} points")
    f = np.asarray(point_feats, dtype=np.float64)
    nbr = neighbor_graph(index, k)
    fi = np.broadcast_to(f[:, None, :], (len(f), k, f.shape[1]))
    return np.concatenate([fi, f[nbr], difference_channels(points, nbr)], axis=-1)


def ri_edge_features(cloud: PointCloud, point_feats, index: KnnIndex, k=32):
    """Invariant edge tensor ``[f_x, f_neighbor, 5 scalars]`` and the per-point channels.

    Returns ``(edges, point_channels, flags)`` where ``flags`` marks points
    with at least one zero-length vector in an angle.
    """
    points = cloud.points
    if k >= len(points):
        raise ValueError(f"k={k} needs more than {len(points)} points")
    f = np.asarray(point_feats, dtype=np.float64)
    nbr = neighbor_graph(index, k)
    geo, bad_e = ri_edge_channels(points, nbr)
    glob, bad_p = ri_point_channels(points, nbr)
    fi = np.broadcast_to(f[:, None, :], (len(f), k, f.shape[1]))
    edges = np.concatenate([fi, f[nbr], geo], axis=-1)
    return edges, glob, bad_e.any(axis=1) | bad_p
