"""Versioned binary checkpoints for :class:`MiniOdfNet`.

Layout (little endian)::

    "ODFM"                      magic
    u32 version                 currently 1
    u8  mode                    0 standard, 1 xyz
    u8  aggregation             0 max, 1 concat
    u16 reserved                zero
    u32 k                       edge-block neighbours
    u32 n_classes
    u32 n_directions
    u32 meta_len, meta bytes    UTF-8 JSON (cone bank, class names), sorted keys
    u32 n_layers
    per layer: u8 name_len, name, u32 in, u32 out, u8 activation (0 relu, 1 identity)
    payload: per layer, weight (in*out, row major) then bias (out), float32
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import ParseError
from .layers import Layer, Mlp
from .model import MiniOdfNet, NetConfig, OdfBlockParams

MAGIC = b"ODFM"
VERSION = 1
_HEAD = struct.Struct("<4sIBBHIIII")
_MODES = ("standard", "xyz")
_AGGS = ("max", "concat")
_ACTS = ("relu", "identity")


def _layers(net):
    for name, mlp in net.mlps():
        for i, layer in enumerate(mlp.layers):
            yield f"{name}.{i}", layer


def encode_checkpoint(net: MiniOdfNet, metadata=None) -> bytes:
    cfg = net.config
    meta = json.dumps(metadata or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = [_HEAD.pack(MAGIC, VERSION, _MODES.index(cfg.mode), _AGGS.index(cfg.aggregation), 0,
                      cfg.k, cfg.n_classes, cfg.n_directions, len(meta)), meta]
    layers = list(_layers(net))
    out.append(struct.pack("<I", len(layers)))
    for name, layer in layers:
        raw = name.encode("ascii")
        fan_in, fan_out = layer.weight.shape
        out.append(struct.pack("<B", len(raw)) + raw
                   + struct.pack("<IIB", fan_in, fan_out, _ACTS.index(layer.activation)))
    for _, layer in layers:
        out.append(np.ascontiguousarray(layer.weight, dtype="<f4").tobytes())
        out.append(np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data, path):
        self.data, self.pos, self.path = data, 0, path

    def fail(self, msg, at=None):
        raise ParseError(msg, self.pos if at is None else at, kind="byte", path=self.path)

    def take(self, n, what):
        if self.pos + n > len(self.data):
            self.fail(f"truncated {what}: need {n} bytes, {len(self.data) - self.pos} left")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


def decode_checkpoint(data: bytes, path=None):
    """Returns ``(net, metadata)``; parameters come back as float64."""
    r = _Reader(data, path)
    magic, version, mode, agg, reserved, k, n_classes, n_dirs, meta_len = r.unpack(
        _HEAD.format, "header")
    if magic != MAGIC:
        r.fail(f"bad magic {magic!r}", 0)
    if version != VERSION:
        r.fail(f"unsupported checkpoint version {version}", 4)
    if mode >= len(_MODES):
        r.fail(f"unknown mode code {mode}", 8)
    if agg >= len(_AGGS):
        r.fail(f"unknown aggregation code {agg}", 9)
    if reserved:
        r.fail("reserved bytes must be zero", 10)
    if k < 1 or n_classes < 2 or n_dirs < 1:
        r.fail("k, class count and direction count must be positive", 12)
    meta_at = r.pos
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        r.fail("metadata is not valid UTF-8 JSON", meta_at)
    if not isinstance(meta, dict):
        r.fail("metadata must be a JSON object", meta_at)
    (n_layers,) = r.unpack("<I", "layer count")
    if n_layers > 4096:
        r.fail(f"implausible layer count {n_layers}", r.pos - 4)
    table = []
    for _ in range(n_layers):
        at = r.pos
        (name_len,) = r.unpack("<B", "layer name length")
        try:
            name = r.take(name_len, "layer name").decode("ascii")
        except UnicodeDecodeError:
            r.fail("layer name is not ASCII", at)
        fan_in, fan_out, act = r.unpack("<IIB", "layer shape")
        if act >= len(_ACTS) or fan_in < 1 or fan_out < 1:
            r.fail(f"bad shape or activation for layer {name!r}", at)
        table.append((name, fan_in, fan_out, _ACTS[act], at))

    groups = {}
    for name, fan_in, fan_out, act, at in table:
        group, _, idx = name.rpartition(".")
        if not group or not idx.isdigit() or int(idx) != len(groups.get(group, [])):
            r.fail(f"unexpected layer name {name!r}", at)
        at_payload = r.pos
        w = np.frombuffer(r.take(4 * fan_in * fan_out, f"weights of {name}"), dtype="<f4")
        b = np.frombuffer(r.take(4 * fan_out, f"bias of {name}"), dtype="<f4")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            r.fail(f"non-finite parameter in layer {name!r}", at_payload)
        groups.setdefault(group, []).append(
            Layer(w.reshape(fan_in, fan_out).astype(np.float64), b.astype(np.float64), act))
    if r.pos != len(data):
        r.fail(f"{len(data) - r.pos} trailing bytes after payload")

    edge_names = sorted((g for g in groups if g.startswith("edge")), key=lambda g: int(g[4:] or -1))
    expected = {"odf_dir", "odf_glob", "head"} | set(edge_names)
    if set(groups) != expected or [f"edge{i}" for i in range(len(edge_names))] != edge_names:
        r.fail(f"unexpected layer groups {sorted(groups)}", 12)
    try:
        head = Mlp(groups["head"])
        dir_mlp = Mlp(groups["odf_dir"])
        glob = Mlp(groups["odf_glob"])
        edges = [Mlp(groups[g]) for g in edge_names]
        cfg = NetConfig(
            n_classes=n_classes, mode=_MODES[mode], n_scales=dir_mlp.in_width, n_directions=n_dirs,
            dir_widths=tuple(l.weight.shape[1] for l in dir_mlp.layers),
            glob_width=glob.out_width, edge_widths=tuple(e.out_width for e in edges),
            head_widths=tuple(l.weight.shape[1] for l in head.layers[:-1]), k=k,
            aggregation=_AGGS[agg])
    except ValueError as exc:
        r.fail(f"inconsistent layer table: {exc}", 12)
    net = MiniOdfNet(cfg, OdfBlockParams(dir_mlp, glob), edges, head)
    _check_shapes(net, r)
    return net, meta


def _check_shapes(net, r):
    from .model import init_net

    ref = init_net(net.config, 0)
    for (name, a), (_, b) in zip(net.named_parameters(), ref.named_parameters()):
        if a.shape != b.shape:
            r.fail(f"layer {name} has shape {a.shape}, architecture needs {b.shape}", 12)
    for mlp_name, mlp in net.mlps():
        for i, layer in enumerate(mlp.layers):
            want = "identity" if (mlp_name == "head" and i == len(mlp.layers) - 1) else "relu"
            if layer.activation != want:
                r.fail(f"layer {mlp_name}.{i} must use {want}", 12)


def save_checkpoint(path, net: MiniOdfNet, metadata=None):
    Path(path).write_bytes(encode_checkpoint(net, metadata))


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes(), str(path))
