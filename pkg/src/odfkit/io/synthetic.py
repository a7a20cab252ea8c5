"""Deterministic synthetic shape dataset (four surface classes).

Every sample draws from its own PCG64 stream seeded with
``base_seed ^ sample_index`` where ``sample_index = class_id * samples_per_class + i``,
so samples can be generated in any order or in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import PointCloud, normalize_to_unit_sphere

CLASSES = ("sphere", "box", "corner", "cylinder")


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    samples_per_class: int = 100
    points: int = 512
    noise: float = 0.01
    seed: int = 29
    classes: tuple = CLASSES
    train_fraction: float = 0.8

    def __post_init__(self):
        unknown = set(self.classes) - set(CLASSES)
        if unknown:
            raise ValueError(f"unknown shape classes {sorted(unknown)}")
        if self.samples_per_class < 1 or self.points < 2 or self.noise < 0:
            raise ValueError("samples_per_class >= 1, points >= 2 and noise >= 0 required")


@dataclass
class SyntheticDataset:
    spec: SyntheticDatasetSpec
    clouds: list
    split: list  # "train" / "test" per cloud

    @property
    def train(self):
        return [c for c, s in zip(self.clouds, self.split) if s == "train"]

    @property
    def test(self):
        return [c for c, s in zip(self.clouds, self.split) if s == "test"]

    @property
    def class_names(self):
        return list(self.spec.classes)


def sample_rng(seed, sample_index):
    return np.random.Generator(np.random.PCG64(int(seed) ^ int(sample_index)))


def _pick(rng, areas, n):
    p = np.asarray(areas, dtype=np.float64)
    return rng.choice(len(p), size=n, p=p / p.sum())


def sphere_shell(rng, n, noise):
    """Antipodal pairs with shared radial jitter, so the centroid is exactly the origin.

    The jitter is Gaussian truncated at two standard deviations.
    """
    half = (n + 1) // 2
    d = rng.normal(size=(half, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = 1.0 + np.clip(rng.normal(0.0, noise, size=half), -2 * noise, 2 * noise)
    p = d * r[:, None]
    return np.concatenate([p, -p])[:n]


def box(rng, n, noise):
    ext = rng.uniform(0.5, 1.0, size=3)
    pts = np.empty((n, 3))
    # faces: +-x, +-y, +-z
    areas = [ext[1] * ext[2]] * 2 + [ext[0] * ext[2]] * 2 + [ext[0] * ext[1]] * 2
    face = _pick(rng, areas, n)
    uv = rng.uniform(-1.0, 1.0, size=(n, 3)) * ext
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    pts[:] = uv
    pts[np.arange(n), axis] = sign * ext[axis]
    return pts + rng.normal(0.0, noise, size=pts.shape)


def corner(rng, n, noise):
    """Two perpendicular rectangles sharing the edge along y."""
    a, b, c = rng.uniform(0.6, 1.0, size=3)
    which = _pick(rng, [a * 2 * b, c * 2 * b], n)
    y = rng.uniform(-b, b, size=n)
    t = rng.uniform(0.0, 1.0, size=n)
    pts = np.where(which[:, None] == 0,
                   np.stack([t * a, y, np.zeros(n)], axis=1),
                   np.stack([np.zeros(n), y, t * c], axis=1))
    return pts + rng.normal(0.0, noise, size=pts.shape)


def cylinder(rng, n, noise):
    r = rng.uniform(0.4, 0.7)
    h = rng.uniform(0.6, 1.0)
    part = _pick(rng, [2 * np.pi * r * 2 * h, np.pi * r * r, np.pi * r * r], n)
    theta = rng.uniform(0.0, 2 * np.pi, size=n)
    z = rng.uniform(-h, h, size=n)
    rad = r * np.sqrt(rng.uniform(0.0, 1.0, size=n))
    side = np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    cap = np.stack([rad * np.cos(theta), rad * np.sin(theta), np.where(part == 1, h, -h)], axis=1)
    pts = np.where(part[:, None] == 0, side, cap)
    return pts + rng.normal(0.0, noise, size=pts.shape)


GENERATORS = {"sphere": sphere_shell, "box": box, "corner": corner, "cylinder": cylinder}


def generate_sample(spec: SyntheticDatasetSpec, class_id: int, i: int) -> PointCloud:
    rng = sample_rng(spec.seed, class_id * spec.samples_per_class + i)
    name = spec.classes[class_id]
    pts = GENERATORS[name](rng, spec.points, spec.noise)
    return normalize_to_unit_sphere(PointCloud(pts, label=class_id))


def generate_synthetic_dataset(spec: SyntheticDatasetSpec = SyntheticDatasetSpec()) -> SyntheticDataset:
    clouds, split = [], []
    n_train = int(round(spec.samples_per_class * spec.train_fraction))
    for class_id in range(len(spec.classes)):
        for i in range(spec.samples_per_class):
            clouds.append(generate_sample(spec, class_id, i))
            split.append("train" if i < n_train else "test")
    return SyntheticDataset(spec, clouds, split)
