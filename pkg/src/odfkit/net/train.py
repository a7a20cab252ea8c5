"""Training, voting inference and contribution maps for :class:`MiniOdfNet`."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from ..errors import NonFiniteLossError
from ..features import ConeBank, default_cone_bank
from ..geometry import PointCloud, icosphere_directions
from .model import (MiniOdfNet, NetConfig, NetInput, forward, init_net, loss_and_grads,
                    point_features, prepare_input, softmax)

log = logging.getLogger(__name__)

ROTATIONS = ("none", "z", "so3")
# Sub-stream tags so augmentation, scenario rotations and batching never share draws.
_AUG, _ROT, _VOTE = 0xA0, 0xB0, 0xC0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 0.01
    lr_schedule: str = "constant"
    momentum: float = 0.9
    seed: int = 0
    scale_range: Optional[tuple] = (0.8, 1.25)
    flip_x: bool = True
    flip_y: bool = True
    rotate90: bool = True
    half_deletion: bool = True
    rotation: str = "none"
    views: int = 4
    votes: int = 1
    vote_scale_range: tuple = (0.8, 1.25)

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.views, self.votes) < 1:
            raise ValueError("epochs, batch_size, views and votes must be positive")
        for rng_ in (self.scale_range, self.vote_scale_range):
            if rng_ is not None and not 0 < rng_[0] <= rng_[1]:
                raise ValueError(f"scale range must satisfy 0 < lo <= hi, got {rng_}")
        if self.rotation not in ROTATIONS:
            raise ValueError(f"rotation must be one of {ROTATIONS}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError("lr_schedule must be 'cosine' or 'constant'")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")


def learning_rate(config: TrainConfig, step, total_steps):
    """Step size at ``step``; cosine decays from the base rate towards zero."""
    if config.lr_schedule == "constant":
        return config.learning_rate
    return 0.5 * config.learning_rate * (1.0 + np.cos(np.pi * step / total_steps))


def stream(seed, tag):
    return np.random.Generator(np.random.PCG64([int(seed), int(tag)]))


# -- augmentation ---------------------------------------------------------------

_QUARTER_TURNS = [np.array(m, dtype=np.float64) for m in (
    [[1, 0, 0], [0, 1, 0], [0, 0, 1]],
    [[0, -1, 0], [1, 0, 0], [0, 0, 1]],
    [[-1, 0, 0], [0, -1, 0], [0, 0, 1]],
    [[0, 1, 0], [-1, 0, 0], [0, 0, 1]],
)]


def augment(cloud: PointCloud, config: TrainConfig, rng) -> PointCloud:
    """Per-axis scaling, x/y flips and a quarter-turn about z, in that order.

    Half-point deletion is not applied here: it only masks the pooled feature
    stream during training (see :func:`deletion_mask`).
    """
    pts = cloud.points.copy()
    if config.scale_range is not None:
        lo, hi = config.scale_range
        pts *= rng.uniform(lo, hi, size=3)
    if config.flip_x and rng.random() < 0.5:
        pts[:, 0] = -pts[:, 0]
    if config.flip_y and rng.random() < 0.5:
        pts[:, 1] = -pts[:, 1]
    if config.rotate90:
        pts = pts @ _QUARTER_TURNS[int(rng.integers(4))].T
    return cloud.with_points(pts)


def deletion_mask(n, rng):
    """Sorted indices of a random half of the points."""
    return np.sort(rng.permutation(n)[: max(1, n // 2)])


def random_rotation(rng, kind="so3"):
    if kind == "none":
        return np.eye(3)
    if kind == "z":
        a = rng.uniform(0.0, 2 * np.pi)
        c, s = np.cos(a), np.sin(a)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    if kind == "so3":
        q = rng.normal(size=4)
        w, x, y, z = q / np.linalg.norm(q)
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ])
    raise ValueError(f"unknown rotation kind {kind!r}")


def rotate_cloud(cloud: PointCloud, rotation) -> PointCloud:
    return cloud.with_points(cloud.points @ np.asarray(rotation).T)


# -- training ---------------------------------------------------------------------

@dataclass
class TrainResult:
    net: MiniOdfNet
    step_losses: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)
    train_accuracy: float = float("nan")


def default_bank():
    return default_cone_bank(icosphere_directions(1))


def _views(clouds, net_cfg, train_cfg, bank, workers):
    aug_rng = stream(train_cfg.seed, _AUG)
    rot_rng = stream(train_cfg.seed, _ROT)
    views = []
    for _ in range(train_cfg.views):
        inputs = []
        for c in clouds:
            a = augment(c, train_cfg, aug_rng)
            a = rotate_cloud(a, random_rotation(rot_rng, train_cfg.rotation))
            inputs.append(prepare_input(a, net_cfg, bank, workers, odf_dtype=np.float32))
        views.append(inputs)
    return views


def train(config: TrainConfig, clouds, net_config: Optional[NetConfig] = None,
          bank: Optional[ConeBank] = None, workers=None, net: Optional[MiniOdfNet] = None,
          inputs=None) -> TrainResult:
    """SGD with momentum over labelled clouds.

    ODFs are computed once per augmented view (``config.views`` views per
    cloud); epoch ``e`` trains on view ``e % views``.  Precomputed ``inputs``
    (a list of views, each a list of :class:`NetInput`) bypass augmentation.
    """
    bank = bank or default_bank()
    labels = sorted({c.label for c in clouds}) if inputs is None else sorted(
        {i.label for i in inputs[0]})
    if len(labels) < 2:
        raise ValueError("training needs at least two classes")
    if net_config is None and net is not None:
        net_config = net.config
    if net_config is None:
        net_config = NetConfig(n_classes=max(labels) + 1, n_scales=bank.n_scales,
                               n_directions=bank.n_directions)
    net = net or init_net(net_config, config.seed)
    views = inputs if inputs is not None else _views(clouds, net_config, config, bank, workers)
    rng = stream(config.seed, 0)
    velocity = {name: np.zeros_like(p) for name, p in net.named_parameters()}
    params = dict(net.named_parameters())
    result = TrainResult(net)
    n = len(views[0])
    total_steps = config.epochs * -(-n // config.batch_size)
    for epoch in range(config.epochs):
        data = views[epoch % len(views)]
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            batch = [data[i] for i in order[start:start + config.batch_size]]
            keeps = [deletion_mask(len(b), rng) for b in batch] if config.half_deletion else None
            try:
                loss, grads = loss_and_grads(net, batch, keeps)
            except NonFiniteLossError as exc:
                ids = [int(order[start + s]) for s in exc.sample_ids]
                raise NonFiniteLossError(
                    f"training diverged at epoch {epoch}, step {len(result.step_losses)}: {exc}",
                    ids) from None
            lr = learning_rate(config, len(result.step_losses), total_steps)
            for name, g in grads.items():
                v = velocity[name]
                v *= config.momentum
                v += g
                params[name] -= lr * v
            result.step_losses.append(loss)
            total += loss * len(batch)
        result.epoch_losses.append(total / n)
        log.info("epoch %d loss %.4f", epoch, total / n)
    result.train_accuracy = accuracy(net, views[0])
    return result


# -- inference ---------------------------------------------------------------------

def predict_proba(net: MiniOdfNet, inp: NetInput):
    logits, _ = forward(net, inp)
    return softmax(logits)


def accuracy(net: MiniOdfNet, inputs):
    hits = [int(np.argmax(predict_proba(net, i)) == i.label) for i in inputs]
    return float(np.mean(hits)) if hits else float("nan")


def predict_with_voting(net: MiniOdfNet, cloud: PointCloud, votes, rng, scale_range=(0.8, 1.25),
                        bank: Optional[ConeBank] = None, workers=None):
    """Average softmax over ``votes`` randomly rescaled copies; ODFs recomputed for each.

    Each copy gets one uniform scale factor for all three axes.  Training
    already covers per-axis scaling; voting only smooths over object size.
    """
    if votes < 1:
        raise ValueError("votes must be >= 1")
    bank = bank or default_bank()
    lo, hi = scale_range
    probs = np.zeros(net.config.n_classes)
    for _ in range(votes):
        scaled = cloud.with_points(cloud.points * rng.uniform(lo, hi))
        probs += predict_proba(net, prepare_input(scaled, net.config, bank, workers))
    probs /= votes
    return int(np.argmax(probs)), probs


def evaluate(net: MiniOdfNet, clouds, bank=None, rotation="none", seed=0, votes=1,
             scale_range=(0.8, 1.25), workers=None):
    """Accuracy on ``clouds`` after a seeded per-cloud rotation of the given kind.

    Returns ``(single_shot_accuracy, voting_accuracy)``; the second is ``None``
    when ``votes == 1`` is not requested separately.
    """
    bank = bank or default_bank()
    rot_rng = stream(seed, _ROT)
    vote_rng = stream(seed, _VOTE)
    single, voted = [], []
    for c in clouds:
        r = rotate_cloud(c, random_rotation(rot_rng, rotation))
        inp = prepare_input(r, net.config, bank, workers)
        single.append(int(np.argmax(predict_proba(net, inp))) == c.label)
        if votes > 1:
            label, _ = predict_with_voting(net, r, votes, vote_rng, scale_range, bank, workers)
            voted.append(label == c.label)
    single_acc = float(np.mean(single)) if single else float("nan")
    return single_acc, (float(np.mean(voted)) if voted else None)


@dataclass
class ContributionMap:
    counts: np.ndarray  # credits per point
    tied_channels: int
    width: int

    @property
    def degenerate(self):
        return self.tied_channels == self.width


def contribution_map(net: MiniOdfNet, inp: NetInput) -> ContributionMap:
    """Credit each pooled channel to the point that wins its max-pool."""
    feats = point_features(net, inp)
    winners = np.argmax(feats, axis=0)
    best = feats.max(axis=0)
    tied = int(((feats == best).sum(axis=0) > 1).sum())
    counts = np.bincount(winners, minlength=len(inp))
    return ContributionMap(counts, tied, feats.shape[1])


# -- rotation scenarios ---------------------------------------------------------------

SCENARIOS = (("z/z", "z", "z"), ("SO3/SO3", "so3", "so3"), ("z/SO3", "z", "so3"))


def rotation_scenarios(train_clouds, test_clouds, config: TrainConfig, net_config: NetConfig,
                       bank=None, workers=None, eval_seed=1):
    """Accuracies for the z/z, SO3/SO3 and z/SO3 train/test protocols."""
    bank = bank or default_bank()
    models = {}
    out = {}
    for name, train_rot, test_rot in SCENARIOS:
        if train_rot not in models:
            cfg = replace(config, rotation=train_rot)
            models[train_rot] = train(cfg, train_clouds, net_config, bank, workers).net
        acc, _ = evaluate(models[train_rot], test_clouds, bank, test_rot, eval_seed, workers=workers)
        out[name] = acc
    return out, models
