"""Dense layers with hand-written reverse mode.

Everything works on arrays with arbitrary leading dimensions; the last axis
is the feature axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("relu", "identity")


@dataclass
class Layer:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ValueError("layer weight must be (in, out) and bias (out,)")
        if not (np.isfinite(self.weight).all() and np.isfinite(self.bias).all()):
            raise ValueError("layer parameters must be finite")

    @property
    def shape(self):
        return self.weight.shape


@dataclass
class Mlp:
    layers: list

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.weight.shape[1] != b.weight.shape[0]:
                raise ValueError(f"layer widths do not chain: {a.shape} -> {b.shape}")

    @property
    def in_width(self):
        return self.layers[0].weight.shape[0]

    @property
    def out_width(self):
        return self.layers[-1].weight.shape[1]

    def forward(self, x):
        cache = []
        h = x
        for layer in self.layers:
            z = h @ layer.weight + layer.bias
            mask = z > 0 if layer.activation == "relu" else None
            cache.append((h, mask))
            h = z * mask if mask is not None else z
        return h, cache

    def backward(self, dy, cache):
        """Returns ``(dx, grads)`` with ``grads`` a list of ``(dW, db)`` per layer."""
        grads = [None] * len(self.layers)
        g = dy
        for i in range(len(self.layers) - 1, -1, -1):
            h, mask = cache[i]
            if mask is not None:
                g = g * mask
            h2 = h.reshape(-1, h.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            grads[i] = (h2.T @ g2, g2.sum(axis=0))
            g = g @ self.layers[i].weight.T
        return g, grads

    def signature(self, cache):
        return [m for _, m in cache if m is not None]


def init_mlp(rng, widths, last_activation="relu", bias_scale=0.0):
    """He-normal weights for ReLU layers, LeCun-normal for a linear output.

    Biases are zero unless ``bias_scale`` is set.
    """
    layers = []
    for i, (a, b) in enumerate(zip(widths, widths[1:])):
        act = last_activation if i == len(widths) - 2 else "relu"
        gain = 2.0 if act == "relu" else 1.0
        w = rng.normal(0.0, np.sqrt(gain / a), size=(a, b))
        bias = rng.normal(0.0, bias_scale, size=b) if bias_scale else np.zeros(b)
        layers.append(Layer(w, bias, act))
    return Mlp(layers)
