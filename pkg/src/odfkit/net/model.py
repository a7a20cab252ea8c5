"""A small ODF classifier with manual gradients.

Per point, ODFDir embeds each direction's scale vector with shared weights,
the embeddings are reduced over directions and ODFGlob maps the result to the
point's ODF feature.  Two edge blocks mix each point with its k nearest
neighbours, the per-point features are max-pooled over the cloud and a three
layer head produces class scores.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import NonFiniteLossError
from ..features import ConeBank, default_cone_bank, odf_cloud
from ..geometry import PointCloud, build_knn_index, icosphere_directions
from .edges import difference_channels, neighbor_graph, ri_edge_channels, ri_point_channels
from .layers import Mlp, init_mlp

MODES = ("standard", "xyz")
AGGREGATIONS = ("max", "concat")


@dataclass(frozen=True)
class NetConfig:
    n_classes: int = 4
    mode: str = "standard"
    n_scales: int = 8
    n_directions: int = 42
    dir_widths: tuple = (32, 32)
    glob_width: int = 64
    edge_widths: tuple = (64, 128)
    head_widths: tuple = (128, 64)
    k: int = 32
    aggregation: str = "max"
    # Overrides the mode's ODF alignment (used by ablations only).
    odf_alignment: Optional[str] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")

    @property
    def point_extra(self):
        """Channels appended to the ODF feature before the edge blocks."""
        return 3 if self.mode == "standard" else 0

    @property
    def edge_geometry(self):
        return 3 if self.mode == "standard" else 5

    @property
    def pool_extra(self):
        """Channels appended to the pooled feature stream."""
        return 0 if self.mode == "standard" else 2

    @property
    def global_width(self):
        return self.glob_width + sum(self.edge_widths) + self.pool_extra

    @property
    def alignment(self):
        if self.odf_alignment is not None:
            return self.odf_alignment
        return "ri_xy" if self.mode == "standard" else "ri_xyz"


@dataclass
class OdfBlockParams:
    odf_dir: Mlp
    odf_glob: Mlp


@dataclass
class MiniOdfNet:
    config: NetConfig
    odf_block: OdfBlockParams
    edge_blocks: list
    head: Mlp

    @property
    def mode(self):
        return self.config.mode

    def mlps(self):
        yield "odf_dir", self.odf_block.odf_dir
        yield "odf_glob", self.odf_block.odf_glob
        for i, b in enumerate(self.edge_blocks):
            yield f"edge{i}", b
        yield "head", self.head

    def named_parameters(self):
        """``(name, array)`` pairs in a fixed order; arrays are live views."""
        out = []
        for name, mlp in self.mlps():
            for i, layer in enumerate(mlp.layers):
                out.append((f"{name}.{i}.weight", layer.weight))
                out.append((f"{name}.{i}.bias", layer.bias))
        return out

    def n_parameters(self):
        return sum(a.size for _, a in self.named_parameters())

    def copy(self):
        return copy.deepcopy(self)


def init_net(config: NetConfig, seed=0, bias_scale=0.0) -> MiniOdfNet:
    rng = np.random.Generator(np.random.PCG64(seed))
    dir_mlp = init_mlp(rng, (config.n_scales,) + tuple(config.dir_widths), bias_scale=bias_scale)
    glob_in = config.dir_widths[-1]
    if config.aggregation == "concat":
        glob_in *= config.n_directions
    glob = init_mlp(rng, (glob_in, config.glob_width), bias_scale=bias_scale)
    edges = []
    f = config.glob_width + config.point_extra
    for w in config.edge_widths:
        # Edge blocks are single ReLU layers; the forward pass relies on it.
        edges.append(init_mlp(rng, (2 * f + config.edge_geometry, w), bias_scale=bias_scale))
        f = w
    head = init_mlp(rng, (config.global_width,) + tuple(config.head_widths) + (config.n_classes,),
                    last_activation="identity", bias_scale=bias_scale)
    return MiniOdfNet(config, OdfBlockParams(dir_mlp, glob), edges, head)


# -- inputs -------------------------------------------------------------------

@dataclass
class NetInput:
    points: np.ndarray
    odf: np.ndarray  # (N, D, S), float32 or float64
    nbr: np.ndarray  # (N, k)
    geometry: np.ndarray  # (N, k, G)
    point_extra: np.ndarray  # (N, E)
    pool_extra: np.ndarray  # (N, P)
    label: Optional[int] = None

    def __len__(self):
        return len(self.points)


def build_input(points, odf, nbr, mode, label=None) -> NetInput:
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if mode == "standard":
        geo = difference_channels(points, nbr)
        pe, pool = points, np.zeros((n, 0))
    else:
        geo, _ = ri_edge_channels(points, nbr)
        pool, _ = ri_point_channels(points, nbr)
        pe = np.zeros((n, 0))
    odf = np.asarray(odf)
    if odf.dtype != np.float32:
        odf = odf.astype(np.float64, copy=False)
    return NetInput(points, odf, nbr, geo, pe, pool, label)


def prepare_input(cloud: PointCloud, config: NetConfig, bank: Optional[ConeBank] = None,
                  workers=None, alignment=None, odf_dtype=np.float64) -> NetInput:
    """ODFs, neighbour graph and geometric channels for one cloud.

    ``odf_dtype=np.float32`` halves the memory of cached training inputs; the
    network still computes in float64.
    """
    bank = bank or default_cone_bank(icosphere_directions(1))
    index = build_knn_index(cloud)
    field_ = odf_cloud(cloud, bank, alignment or config.alignment, workers=workers, index=index,
                       dtype=odf_dtype)
    nbr = neighbor_graph(index, config.k)
    return build_input(cloud.points, field_.values, nbr, config.mode, cloud.label)


# -- forward / backward ---------------------------------------------------------

def leading_argmax(x):
    """Max over axis 0 with its argmax; the first maximal entry wins ties."""
    best = x[0].copy()
    idx = np.zeros(best.shape, dtype=np.intp)
    for j in range(1, len(x)):
        better = x[j] > best
        best = np.where(better, x[j], best)
        idx[better] = j
    return best, idx


def _scatter_leading(d, idx, length):
    out = np.zeros((length,) + d.shape, dtype=d.dtype)
    np.put_along_axis(out, idx[None], d[None], axis=0)
    return out


def odf_block_forward(params: OdfBlockParams, odf, aggregation="max"):
    """ODFGlob(aggregate_directions(ODFDir(odf))) for ``odf`` of shape ``(..., D, S)``."""
    odf = np.asarray(odf, dtype=np.float64)
    if odf.shape[-1] != params.odf_dir.in_width:
        raise ValueError(f"ODF slice has {odf.shape[-1]} scales, block expects {params.odf_dir.in_width}")
    a, _ = params.odf_dir.forward(odf)
    if aggregation == "max":
        agg = a.max(axis=-2)
    else:
        agg = a.reshape(a.shape[:-2] + (-1,))
    out, _ = params.odf_glob.forward(agg)
    return out


def _split_first(layer, f_width):
    w = layer.weight
    return w[:f_width], w[f_width:2 * f_width], w[2 * f_width:]


def _edge_forward(layer, f, nbr_t, geo_t):
    """``max_j relu([f_i, f_j, g_ij] W + b)`` without materialising the edge tensor.

    The layer is linear in the concatenation, and ReLU commutes with the max,
    so only the neighbour-dependent part ``f_j Wb + g_ij Wc`` is maximised.
    """
    wa, wb, wc = _split_first(layer, f.shape[1])
    a = f @ wa + layer.bias
    b = f @ wb
    best = b[nbr_t[0]] + geo_t[0] @ wc
    idx = np.zeros(best.shape, dtype=np.intp)
    for j in range(1, len(nbr_t)):
        cand = b[nbr_t[j]] + geo_t[j] @ wc
        better = cand > best
        best = np.where(better, cand, best)
        idx[better] = j
    z = a + best
    mask = z > 0
    return z * mask, (f, idx, mask)


def _features(net: MiniOdfNet, inp: NetInput):
    cfg = net.config
    n = len(inp)
    if inp.odf.ndim != 3 or inp.odf.shape[2] != cfg.n_scales:
        raise ValueError("ODF field scale count does not match the network")
    if inp.nbr.shape[1] != cfg.k:
        raise ValueError(f"neighbour graph has k={inp.nbr.shape[1]}, network expects {cfg.k}")
    c = {}
    odf_t = np.ascontiguousarray(inp.odf.transpose(1, 0, 2), dtype=np.float64)  # (D, N, S)
    a, c["dir"] = net.odf_block.odf_dir.forward(odf_t)
    c["n_dirs"] = a.shape[0]
    if cfg.aggregation == "max":
        agg, c["dir_idx"] = leading_argmax(a)
    else:
        if a.shape[0] != cfg.n_directions:
            raise ValueError("concat aggregation needs the configured direction count")
        agg = a.transpose(1, 0, 2).reshape(n, -1)
    o, c["glob"] = net.odf_block.odf_glob.forward(agg)

    nbr_t = np.ascontiguousarray(inp.nbr.T)
    geo_t = np.ascontiguousarray(inp.geometry.transpose(1, 0, 2))
    f = np.concatenate([o, inp.point_extra], axis=1)
    c["edges"] = []
    hs = []
    for block in net.edge_blocks:
        f, ce = _edge_forward(block.layers[0], f, nbr_t, geo_t)
        c["edges"].append(ce)
        hs.append(f)
    feats = np.concatenate([o] + hs + [inp.pool_extra], axis=1)
    c["o_width"] = o.shape[1]
    return feats, c


def point_features(net: MiniOdfNet, inp: NetInput):
    """Per-point features right before the global max-pool, ``(N, global_width)``."""
    return _features(net, inp)[0]


def forward(net: MiniOdfNet, inp: NetInput, keep=None):
    """Logits and the cache needed by :func:`backward`.

    ``keep`` optionally restricts which points enter the final max-pool
    (random half-point deletion); everything before the pool sees all points.
    """
    feats, c = _features(net, inp)
    rows = np.arange(len(inp)) if keep is None else np.asarray(keep)
    g, pidx = leading_argmax(feats[rows])
    logits, c["head"] = net.head.forward(g)
    c.update(rows=rows, pool_idx=pidx, feats_shape=feats.shape)
    return logits, c


def classifier_forward(net: MiniOdfNet, inp: NetInput, keep=None):
    return forward(net, inp, keep)[0]


def backward(net: MiniOdfNet, inp: NetInput, cache, dlogits):
    """Gradients for every parameter, keyed like :meth:`MiniOdfNet.named_parameters`."""
    cfg = net.config
    grads = {}

    def store(name, mlp_grads):
        for i, gw in enumerate(mlp_grads):
            if gw is not None:
                grads[f"{name}.{i}.weight"], grads[f"{name}.{i}.bias"] = gw

    dg, hg = net.head.backward(dlogits, cache["head"])
    store("head", hg)
    n, width = cache["feats_shape"]
    dfeats = np.zeros((n, width))
    dfeats[cache["rows"][cache["pool_idx"]], np.arange(width)] = dg

    ow = cache["o_width"]
    bounds = np.cumsum([ow] + list(cfg.edge_widths))
    do = dfeats[:, :ow].copy()
    rows = np.arange(n)[:, None]

    df = None
    for b in range(len(net.edge_blocks) - 1, -1, -1):
        layer = net.edge_blocks[b].layers[0]
        f, idx, mask = cache["edges"][b]
        dh = dfeats[:, bounds[b]:bounds[b + 1]]
        if df is not None:
            dh = dh + df
        g = dh * mask
        width_b = g.shape[1]
        wa, wb, _ = _split_first(layer, f.shape[1])
        src = inp.nbr[rows, idx]  # neighbour point feeding each (point, channel)
        flat = (src * width_b + np.arange(width_b)).ravel()
        g_src = np.bincount(flat, weights=g.ravel(), minlength=n * width_b).reshape(n, width_b)
        geo_sel = inp.geometry[rows, idx]  # (N, C, G)
        dwc = (geo_sel * g[:, :, None]).sum(axis=0).T
        dw = np.concatenate([f.T @ g, f.T @ g_src, dwc], axis=0)
        grads[f"edge{b}.0.weight"], grads[f"edge{b}.0.bias"] = dw, g.sum(axis=0)
        df = g @ wa.T + g_src @ wb.T

    do += df[:, :ow]
    dagg, gg = net.odf_block.odf_glob.backward(do, cache["glob"])
    store("odf_glob", gg)
    if cfg.aggregation == "max":
        da = _scatter_leading(dagg, cache["dir_idx"], cache["n_dirs"])
    else:
        da = dagg.reshape(n, cache["n_dirs"], -1).transpose(1, 0, 2)
    _, dg_dir = net.odf_block.odf_dir.backward(da, cache["dir"])
    store("odf_dir", dg_dir)
    return grads


def signature(cache):
    """Every discrete choice the forward pass made (ReLU masks and argmaxes)."""
    parts = [m for _, m in cache["dir"] if m is not None]
    parts.append(cache.get("dir_idx"))
    parts += [m for _, m in cache["glob"] if m is not None]
    for _, idx, mask in cache["edges"]:
        parts += [idx, mask]
    parts.append(cache["pool_idx"])
    parts += [m for _, m in cache["head"] if m is not None]
    return parts


def same_signature(a, b):
    return len(a) == len(b) and all(
        (x is None and y is None) or (x is not None and y is not None and np.array_equal(x, y))
        for x, y in zip(a, b))


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, label):
    # Non-finite logits give a NaN loss, which the caller reports; keep numpy quiet.
    with np.errstate(invalid="ignore", over="ignore"):
        z = logits - logits.max()
        lse = np.log(np.exp(z).sum())
        return lse - z[label], softmax(logits)


def loss_and_grads(net: MiniOdfNet, batch, keeps=None):
    """Mean cross-entropy over ``batch`` (a sequence of labelled inputs) and its gradients.

    Gradients accumulate in sample order, so the result is deterministic.
    """
    total = 0.0
    acc = None
    b = len(batch)
    for s, inp in enumerate(batch):
        if inp.label is None or not 0 <= inp.label < net.config.n_classes:
            raise ValueError(f"sample {s} has label {inp.label!r} outside [0, {net.config.n_classes})")
        keep = None if keeps is None else keeps[s]
        logits, cache = forward(net, inp, keep)
        loss, prob = cross_entropy(logits, inp.label)
        if not np.isfinite(loss):
            raise NonFiniteLossError(f"non-finite loss {loss} on sample {s}", [s])
        dlogits = prob.copy()
        dlogits[inp.label] -= 1.0
        g = backward(net, inp, cache, dlogits / b)
        total += loss
        if acc is None:
            acc = g
        else:
            for key in acc:
                acc[key] += g[key]
    return total / b, acc

