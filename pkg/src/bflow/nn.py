"""Tiny dense / 3x3-conv networks with hand-written backward passes.

Every module keeps its parameters in ``self.params`` and accumulates
gradients into ``self.grads`` (same keys, same shapes). Forward passes cache
what the backward pass needs; only the most recent forward is remembered.
"""

from __future__ import annotations

import numpy as np


class Module:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def _acc(self, key, g):
        if key in self.grads:
            self.grads[key] += g
        else:
            self.grads[key] = g.copy()


class Dense(Module):
    def __init__(self, n_in, n_out, rng=None, zero=False):
        super().__init__()
        if zero or rng is None:
            w = np.zeros((n_in, n_out))
        else:
            w = rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / n_in)
        self.params = {"W": w, "b": np.zeros(n_out)}

    def forward(self, x):
        self._cache = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dy):
        x = self._cache
        self._acc("W", x.T @ dy)
        self._acc("b", dy.sum(axis=0))
        return dy @ self.params["W"].T


def _im2col(x: np.ndarray) -> np.ndarray:
    """(N, H, W, C) -> (N, H, W, 9C) of 3x3 'same' neighbourhoods, zero padded."""
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = [xp[:, i : i + h, j : j + w, :] for i in range(3) for j in range(3)]
    return np.concatenate(cols, axis=-1)


def _col2im(cols: np.ndarray, c: int) -> np.ndarray:
    n, h, w, _ = cols.shape
    out = np.zeros((n, h + 2, w + 2, c))
    k = 0
    for i in range(3):
        for j in range(3):
            out[:, i : i + h, j : j + w, :] += cols[..., k * c : (k + 1) * c]
            k += 1
    return out[:, 1:-1, 1:-1, :]


class Conv3x3(Module):
    """3x3 convolution with zero 'same' padding on channel-last images."""

    def __init__(self, c_in, c_out, rng=None, zero=False):
        super().__init__()
        self.c_in = c_in
        if zero or rng is None:
            w = np.zeros((9 * c_in, c_out))
        else:
            w = rng.standard_normal((9 * c_in, c_out)) * np.sqrt(2.0 / (9 * c_in))
        self.params = {"W": w, "b": np.zeros(c_out)}

    def forward(self, x):
        cols = _im2col(x)
        self._cache = cols
        return cols @ self.params["W"] + self.params["b"]

    def backward(self, dy):
        cols = self._cache
        flat_cols = cols.reshape(-1, cols.shape[-1])
        flat_dy = dy.reshape(-1, dy.shape[-1])
        self._acc("W", flat_cols.T @ flat_dy)
        self._acc("b", flat_dy.sum(axis=0))
        return _col2im(dy @ self.params["W"].T, self.c_in)


class Sequential(Module):
    """Linear/conv stack with ReLU between layers; the last layer starts at zero."""

    def __init__(self, layers):
        super().__init__()
        self.layers = layers
        self._masks = []
        self.params = {
            f"{i}.{k}": v for i, layer in enumerate(layers) for k, v in layer.params.items()
        }

    def forward(self, x):
        self._masks = []
        for i, layer in enumerate(self.layers):
            x = layer.forward(x)
            if i < len(self.layers) - 1:
                mask = x > 0
                self._masks.append(mask)
                x = x * mask
        return x

    def backward(self, dy):
        for i in range(len(self.layers) - 1, -1, -1):
            if i < len(self.layers) - 1:
                dy = dy * self._masks[i]
            dy = self.layers[i].backward(dy)
        return dy

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    @property
    def grads(self):
        return {
            f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.grads.items()
        }

    @grads.setter
    def grads(self, value):
        pass


def mlp(n_in, hidden, n_out, rng):
    return Sequential(
        [Dense(n_in, hidden, rng), Dense(hidden, hidden, rng), Dense(hidden, n_out, zero=True)]
    )


def convnet(c_in, hidden, c_out, rng):
    return Sequential(
        [Conv3x3(c_in, hidden, rng), Conv3x3(hidden, hidden, rng), Conv3x3(hidden, c_out, zero=True)]
    )
