"""ASCII point-cloud readers and writers: XYZ, OFF and ASCII PLY.

Parsers tolerate arbitrary whitespace but are strict about declared counts;
every error carries the 1-based line number where parsing stopped.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import ParseError
from ..geometry import PointCloud

FORMATS = ("xyz", "off", "ply_ascii")
_SUFFIX = {".xyz": "xyz", ".txt": "xyz", ".off": "off", ".ply": "ply_ascii"}


def infer_format(path):
    fmt = _SUFFIX.get(Path(path).suffix.lower())
    if fmt is None:
        raise ValueError(f"cannot infer point-cloud format from {path!s}; pass format=")
    return fmt


def _floats(tokens, lineno, path):
    try:
        vals = [float(t) for t in tokens]
    except ValueError:
        raise ParseError(f"expected numbers, got {' '.join(tokens)!r}", lineno, path=path) from None
    if not all(np.isfinite(vals)):
        raise ParseError("non-finite coordinate", lineno, path=path)
    return vals


def _lines(text):
    """``(lineno, tokens)`` for non-blank, non-comment lines."""
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield no, line.split()


def parse_xyz(text, path=None):
    pts, cols = [], []
    for no, tok in _lines(text):
        if len(tok) not in (3, 6):
            raise ParseError(f"expected 3 or 6 columns, got {len(tok)}", no, path=path)
        vals = _floats(tok, no, path)
        pts.append(vals[:3])
        if len(tok) == 6:
            cols.append(vals[3:])
        elif cols:
            raise ParseError("color columns missing on this line", no, path=path)
    if cols and len(cols) != len(pts):
        raise ParseError("color columns must be present on every line or none", None, path=path)
    if not pts:
        raise ParseError("no points in file", 1, path=path)
    return PointCloud(np.array(pts), np.array(cols) if cols else None)


def parse_off(text, path=None):
    it = _lines(text)
    last = 0
    try:
        no, tok = next(it)
    except StopIteration:
        raise ParseError("empty file, expected OFF header", 1, path=path) from None
    head = tok[0]
    if not head.upper().startswith("OFF"):
        raise ParseError(f"expected 'OFF' header, got {head!r}", no, path=path)
    # Some ModelNet files glue the counts onto the header: "OFF490 518 0".
    rest = ([head[3:]] if len(head) > 3 else []) + tok[1:]
    last = no
    if not rest:
        try:
            no, rest = next(it)
        except StopIteration:
            raise ParseError("missing vertex/face counts", last + 1, path=path) from None
    try:
        counts = [int(t) for t in rest]
    except ValueError:
        raise ParseError(f"bad counts line {' '.join(rest)!r}", no, path=path) from None
    if len(counts) != 3 or min(counts) < 0:
        raise ParseError("counts line must be 'n_vertices n_faces n_edges'", no, path=path)
    nv, nf, _ = counts
    last = no
    pts = []
    for _ in range(nv):
        try:
            no, tok = next(it)
        except StopIteration:
            raise ParseError(f"declared {nv} vertices, found {len(pts)}", last + 1, path=path) from None
        if len(tok) < 3:
            raise ParseError("vertex line needs 3 coordinates", no, path=path)
        pts.append(_floats(tok[:3], no, path))
        last = no
    for f in range(nf):
        try:
            no, tok = next(it)
        except StopIteration:
            raise ParseError(f"declared {nf} faces, found {f}", last + 1, path=path) from None
        try:
            k = int(tok[0])
            idx = [int(t) for t in tok[1:1 + k]]
        except ValueError:
            raise ParseError("malformed face line", no, path=path) from None
        if len(idx) != k or any(i < 0 or i >= nv for i in idx):
            raise ParseError("face references missing vertices", no, path=path)
        last = no
    for no, _ in it:
        raise ParseError("unexpected data after the declared faces", no, path=path)
    if not pts:
        raise ParseError("no vertices in file", last, path=path)
    return PointCloud(np.array(pts))


_COLOR_PROPS = ("red", "green", "blue")


def parse_ply_ascii(text, path=None):
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", 1, path=path)
    elements = []  # [name, count, [props]]
    fmt_seen = False
    end = None
    for no, raw in enumerate(lines[1:], start=2):
        tok = raw.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise ParseError(f"only ascii PLY is supported, got {' '.join(tok[1:])!r}", no, path=path)
            fmt_seen = True
        elif tok[0] == "element":
            try:
                elements.append([tok[1], int(tok[2]), []])
            except (IndexError, ValueError):
                raise ParseError("malformed element line", no, path=path) from None
        elif tok[0] == "property":
            if not elements:
                raise ParseError("property before any element", no, path=path)
            if len(tok) >= 5 and tok[1] == "list":
                elements[-1][2].append(("list", tok[4], tok[2], tok[3]))
            elif len(tok) == 3:
                elements[-1][2].append(("scalar", tok[2], tok[1]))
            else:
                raise ParseError("malformed property line", no, path=path)
        elif tok[0] == "end_header":
            end = no
            break
        else:
            raise ParseError(f"unknown header keyword {tok[0]!r}", no, path=path)
    if end is None:
        raise ParseError("missing end_header", len(lines) + 1, path=path)
    if not fmt_seen:
        raise ParseError("missing format line", end, path=path)

    pts, cols = [], []
    row = end  # 0-based index of the next body line
    for name, count, props in elements:
        names = [p[1] for p in props]
        if name == "vertex":
            for axis in "xyz":
                if axis not in names:
                    raise ParseError(f"vertex element lacks property {axis!r}", end, path=path)
            has_color = all(c in names for c in _COLOR_PROPS)
            if any(p[0] == "list" for p in props):
                raise ParseError("list properties on vertices are not supported", end, path=path)
        for _ in range(count):
            while row < len(lines) and not lines[row].strip():
                row += 1
            if row >= len(lines):
                raise ParseError(f"element {name!r} declares {count} rows; file ended early", row + 1, path=path)
            tok = lines[row].split()
            no = row + 1
            row += 1
            if name != "vertex":
                continue
            if len(tok) != len(props):
                raise ParseError(f"expected {len(props)} values, got {len(tok)}", no, path=path)
            vals = dict(zip(names, _floats(tok, no, path)))
            pts.append([vals["x"], vals["y"], vals["z"]])
            if has_color:
                rgb = [vals[c] for c in _COLOR_PROPS]
                dtype = dict((p[1], p[2]) for p in props)["red"]
                if dtype in ("uchar", "uint8", "char", "int8", "ushort", "short", "int", "uint"):
                    rgb = [v / 255.0 for v in rgb]
                if not all(0.0 <= v <= 1.0 for v in rgb):
                    raise ParseError("color out of range", no, path=path)
                cols.append(rgb)
    while row < len(lines):
        if lines[row].strip():
            raise ParseError("unexpected data after the declared elements", row + 1, path=path)
        row += 1
    if not pts:
        raise ParseError("no vertices in file", end, path=path)
    return PointCloud(np.array(pts), np.array(cols) if cols else None)


def _decode(data, path):
    try:
        return data.decode("ascii")
    except UnicodeDecodeError as exc:
        line = data[:exc.start].count(b"\n") + 1
        raise ParseError("file is not ASCII (binary PLY is not supported)", line, path=path) from None


def read_point_cloud(path, format=None) -> PointCloud:
    fmt = format or infer_format(path)
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    text = _decode(Path(path).read_bytes(), str(path))
    parser = {"xyz": parse_xyz, "off": parse_off, "ply_ascii": parse_ply_ascii}[fmt]
    return parser(text, str(path))


def _num(v):
    return format(float(v), ".17g")


def format_point_cloud(cloud: PointCloud, fmt) -> str:
    pts = cloud.points
    rows = []
    if fmt == "xyz":
        for i, p in enumerate(pts):
            vals = list(p) + ([] if cloud.colors is None else list(cloud.colors[i]))
            rows.append(" ".join(_num(v) for v in vals))
        return "\n".join(rows) + "\n"
    if fmt == "off":
        rows = ["OFF", f"{len(pts)} 0 0"] + [" ".join(_num(v) for v in p) for p in pts]
        return "\n".join(rows) + "\n"
    if fmt == "ply_ascii":
        head = ["ply", "format ascii 1.0", f"element vertex {len(pts)}",
                "property double x", "property double y", "property double z"]
        if cloud.colors is not None:
            head += ["property double red", "property double green", "property double blue"]
        head.append("end_header")
        for i, p in enumerate(pts):
            vals = list(p) + ([] if cloud.colors is None else list(cloud.colors[i]))
            rows.append(" ".join(_num(v) for v in vals))
        return "\n".join(head + rows) + "\n"
    raise ValueError(f"unknown format {fmt!r}")


def write_point_cloud(path, cloud: PointCloud, format=None):
    fmt = format or infer_format(path)
    Path(path).write_text(format_point_cloud(cloud, fmt), encoding="ascii")
