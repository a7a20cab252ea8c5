"""OBJ line-glyph export of per-point ODFs."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..alignment import rotate_directions
from ..geometry import DirectionSet, PointCloud


def glyph_segments(cloud: PointCloud, values, selection, directions, frames=None, length=0.1):
    """Segments ``(point_index, direction_id, start, end)`` for the selected points.

    A segment's length is ``length * v / v_max`` where ``v`` is the largest
    value over scales for that direction and ``v_max`` the largest over the
    point's whole slice.  Zero-length segments are dropped.
    """
    values = np.asarray(values)
    dirs = directions.directions if isinstance(directions, DirectionSet) else np.asarray(directions)
    n = len(cloud)
    segs = []
    for i in selection:
        i = int(i)
        if not 0 <= i < n:
            raise IndexError(f"selected point {i} out of range for {n} points")
        strength = values[i].max(axis=-1).astype(np.float64)
        peak = strength.max()
        if peak <= 0:
            continue
        rot = np.eye(3) if frames is None else frames[i]
        aligned = rotate_directions(dirs, rot)
        for l, v in enumerate(strength):
            if v <= 0:
                continue
            start = cloud.points[i]
            segs.append((i, l, start, start + aligned[l] * (length * v / peak)))
    return segs


def export_glyphs(cloud: PointCloud, values, selection, path, directions, frames=None, length=0.1):
    """Write glyph segments as OBJ ``v``/``l`` elements; returns the segment count."""
    segs = glyph_segments(cloud, values, selection, directions, frames, length)
    lines = ["# ODF glyphs: segment length = scale * value / point max",
             f"# scale {length!r}",
             f"# points {' '.join(str(int(i)) for i in selection)}"]
    for k, (i, l, a, b) in enumerate(segs):
        lines.append(f"# point {i} direction {l}")
        lines.append("v " + " ".join(format(x, ".9g") for x in a))
        lines.append("v " + " ".join(format(x, ".9g") for x in b))
        lines.append(f"l {2 * k + 1} {2 * k + 2}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")
    return len(segs)
