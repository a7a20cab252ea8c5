"""Binary ODF field files.

Layout (little endian)::

    offset  size  field
    0       4     magic b"ODF1"
    4       4     format version (u32, currently 1)
    8       4     point count N (u32, >= 1)
    12      4     direction count D (u32, >= 1)
    16      4     scale count S (u32, >= 1)
    20      1     alignment mode (u8: 0 none, 1 ri_xy, 2 ri_xyz)
    21      3     reserved, zero
    24      4*N*D*S  float32 values, point major, then directions, then scales
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import ParseError
from ..features import ODFField

MAGIC = b"ODF1"
VERSION = 1
HEADER = struct.Struct("<4sIIIIB3s")
MODE_CODES = {"none": 0, "ri_xy": 1, "ri_xyz": 2}
MODE_NAMES = {v: k for k, v in MODE_CODES.items()}


def encode_odf(field: ODFField) -> bytes:
    values = np.asarray(field.values)
    if values.ndim != 3:
        raise ValueError("ODF values must be a (points, directions, scales) tensor")
    n, d, s = values.shape
    if n < 1 or d < 1 or s < 1:
        raise ValueError(f"cannot write an empty ODF field of shape {values.shape}")
    if field.alignment not in MODE_CODES:
        raise ValueError(f"unknown alignment mode {field.alignment!r}")
    v32 = values.astype("<f4", copy=False)
    if not np.all(np.isfinite(v32)) or np.any(v32 < 0):
        raise ValueError("ODF values must be finite and non-negative")
    head = HEADER.pack(MAGIC, VERSION, n, d, s, MODE_CODES[field.alignment], b"\0\0\0")
    return head + np.ascontiguousarray(v32).tobytes()


def decode_odf(data: bytes, path=None) -> ODFField:
    def fail(msg, offset):
        raise ParseError(msg, offset, kind="byte", path=path)

    if len(data) < HEADER.size:
        fail(f"truncated header: {len(data)} of {HEADER.size} bytes", len(data))
    magic, version, n, d, s, mode, reserved = HEADER.unpack_from(data)
    if magic != MAGIC:
        fail(f"bad magic {magic!r}", 0)
    if version != VERSION:
        fail(f"unsupported format version {version}", 4)
    for off, (name, val) in zip((8, 12, 16), (("point", n), ("direction", d), ("scale", s))):
        if val < 1:
            fail(f"{name} count must be >= 1", off)
    if mode not in MODE_NAMES:
        fail(f"unknown alignment code {mode}", 20)
    if reserved != b"\0\0\0":
        fail("reserved bytes must be zero", 21)
    expected = HEADER.size + 4 * n * d * s
    if len(data) < expected:
        fail(f"truncated payload: expected {expected} bytes, got {len(data)}", len(data))
    if len(data) > expected:
        fail(f"{len(data) - expected} trailing bytes after payload", expected)
    values = np.frombuffer(data, dtype="<f4", offset=HEADER.size).reshape(n, d, s)
    bad = ~np.isfinite(values) | (values < 0)
    if bad.any():
        first = int(np.flatnonzero(bad.ravel())[0])
        fail("payload value is negative or not finite", HEADER.size + 4 * first)
    return ODFField(values.astype(np.float32), MODE_NAMES[mode])


def write_odf(path, field: ODFField):
    Path(path).write_bytes(encode_odf(field))


def read_odf(path) -> ODFField:
    return decode_odf(Path(path).read_bytes(), str(path))
