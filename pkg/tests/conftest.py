import math

import numpy as np
import pytest

from odfkit.features import ConeBank, default_cone_bank
from odfkit.geometry import PointCloud, icosphere_directions, normalize_to_unit_sphere
from odfkit.net.model import NetConfig


def random_cloud(seed, n, label=None, normalize=False):
    rng = np.random.Generator(np.random.PCG64(seed))
    cloud = PointCloud(rng.normal(size=(n, 3)), label=label)
    return normalize_to_unit_sphere(cloud) if normalize else cloud


def tiny_bank(level=0):
    return ConeBank(icosphere_directions(level), (math.radians(31.71), math.radians(60.0)), (4, 8))


def tiny_config(mode="standard", n_classes=3, k=6, bank=None):
    bank = bank or tiny_bank()
    return NetConfig(n_classes=n_classes, mode=mode, n_scales=bank.n_scales,
                     n_directions=bank.n_directions, dir_widths=(4, 4), glob_width=6,
                     edge_widths=(6, 8), head_widths=(8, 6), k=k)


@pytest.fixture(scope="session")
def bank42():
    return default_cone_bank(icosphere_directions(1))


def brute_knn(points, i, k):
    """Exhaustive k-NN with the (distance, index) order, self excluded."""
    d = np.sqrt(((points - points[i]) ** 2).sum(axis=1))
    order = sorted((d[j], j) for j in range(len(points)) if j != i)[:k]
    return np.array([j for _, j in order]), np.array([dj for dj, _ in order])
