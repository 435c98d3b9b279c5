"""Multi-scale flow built from actnorm, butterfly, coupling, squeeze and split layers.

Tensors are handled channel-last internally: a sample is ``(D,)`` for flat
data, ``(T, C)`` for 1-D signals and ``(H, W, C)`` for images. Flattening a
sample with ``reshape(-1)`` therefore puts the channels of one site next to
each other, which is the grouping the block-wise butterfly layers expect.
User-facing arrays are channel-first (``(N, C, T)`` / ``(N, C, H, W)``).

Every layer implements

* ``forward(x, cache)`` -> ``(y, contrib)`` where ``contrib`` is the
  per-sample log-determinant (or, for splits, the factored-out log-density);
* ``inverse(y, temperature, rng)`` -> ``x``;
* ``backward(dy, weight)`` -> ``dx``, accumulating parameter gradients for
  the loss ``<dy, y> + weight * sum(contrib)``.
"""

from __future__ import annotations

import copy
import logging
import math
from typing import Sequence

import numpy as np

from . import nn
from .blockwise import (
    blockwise_invert_apply,
    blockwise_log_det,
    blockwise_matvec,
    blockwise_new,
    blockwise_vjp,
    realize_blocks,
)
from .butterfly import (
    ButterflyFactor,
    factor_invert,
    factor_log_det,
    factor_matvec,
    factor_new,
    factor_vjp,
    level_schedule,
    max_level,
)
from .errors import InvalidArgumentError, NonFiniteLossError, ShapeMismatchError

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
SCALE_OFFSET = 2.0


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


class Layer:
    kind = "layer"

    def __init__(self, name: str, in_shape: tuple):
        self.name = name
        self.in_shape = tuple(in_shape)
        self.out_shape = tuple(in_shape)
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    @property
    def channels(self) -> int:
        return self.in_shape[-1]

    @property
    def sites(self) -> int:
        return int(np.prod(self.in_shape[:-1], dtype=np.int64))

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def forward(self, x, cache=False):
        raise NotImplementedError

    def inverse(self, y, temperature=1.0, rng=None):
        raise NotImplementedError

    def backward(self, dy, weight):
        raise NotImplementedError


class ActNorm(Layer):
    """Per-channel ``y = exp(logs) * x + bias`` with data-dependent init."""

    kind = "actnorm"

    def __init__(self, name, in_shape):
        super().__init__(name, in_shape)
        c = self.channels
        self.params = {"logs": np.zeros(c), "bias": np.zeros(c)}
        self.initialized = False

    def initialize(self, x):
        axes = tuple(range(x.ndim - 1))
        mean = x.mean(axis=axes)
        std = x.std(axis=axes)
        if np.any(std == 0):
            log.warning("%s: zero channel std at init, clamping to 1e-6", self.name)
        std = np.maximum(std, 1e-6)
        self.params["logs"][...] = -np.log(std)
        self.params["bias"][...] = -mean / std
        self.initialized = True

    def log_det(self):
        return self.sites * float(np.sum(self.params["logs"]))

    def forward(self, x, cache=False):
        if not self.initialized:
            self.initialize(x)
        s = np.exp(self.params["logs"])
        if cache:
            self._x = x
        y = x * s + self.params["bias"]
        return y, np.full(x.shape[0], self.log_det())

    def inverse(self, y, temperature=1.0, rng=None):
        return (y - self.params["bias"]) * np.exp(-self.params["logs"])

    def backward(self, dy, weight):
        x = self._x
        s = np.exp(self.params["logs"])
        axes = tuple(range(x.ndim - 1))
        n = x.shape[0]
        self.grads["logs"] += np.sum(dy * x, axis=axes) * s + weight * n * self.sites
        self.grads["bias"] += np.sum(dy, axis=axes)
        return dy * s


class ButterflyStep(Layer):
    """Naive or block-wise butterfly layer on the flattened sample.

    ``segments`` splits the flattened vector into contiguous pieces, each with
    its own factor list (naive factors only).
    """

    kind = "butterfly"

    def __init__(
        self,
        name,
        in_shape,
        levels: Sequence[Sequence[int]],
        segments: Sequence[int] | None = None,
        block_size: int = 1,
        init: str = "identity",
        tied: bool = False,
        rng: np.random.Generator | None = None,
    ):
        super().__init__(name, in_shape)
        self.dim = int(np.prod(in_shape))
        self.block_size = int(block_size)
        self.segments = tuple(segments) if segments else (self.dim,)
        if sum(self.segments) != self.dim:
            raise InvalidArgumentError(
                f"segments {self.segments} do not sum to dimension {self.dim}"
            )
        if len(levels) != len(self.segments):
            raise InvalidArgumentError("one level schedule per segment required")
        if self.block_size > 1 and len(self.segments) > 1:
            raise InvalidArgumentError("block-wise layers do not support segments")
        rng = rng or np.random.default_rng(0)
        self.factors: list[list] = []
        for j, (d, sched) in enumerate(zip(self.segments, levels)):
            fs = []
            for i, lvl in enumerate(sched):
                if self.block_size > 1:
                    f = blockwise_new(lvl, d, self.block_size, init, rng)
                    for k, v in f.params.items():
                        self.params[f"s{j}.f{i}.{k}"] = v
                    for k, v in f.buffers.items():
                        self.buffers[f"s{j}.f{i}.{k}"] = v
                else:
                    f = factor_new(lvl, d, init, rng, tied)
                    self.params[f"s{j}.f{i}.w"] = f.weights
                fs.append(f)
            self.factors.append(fs)

    @property
    def blockwise(self):
        return self.block_size > 1

    def _bounds(self):
        ends = np.cumsum(self.segments)
        return [(int(e - d), int(e)) for d, e in zip(self.segments, ends)]

    def log_det(self) -> float:
        total = 0.0
        for fs in self.factors:
            for f in fs:
                total += blockwise_log_det(f) if self.blockwise else factor_log_det(f)[0]
        return total

    def forward(self, x, cache=False):
        n = x.shape[0]
        flat = x.reshape(n, self.dim)
        outs, saved = [], []
        for (a, b), fs in zip(self._bounds(), self.factors):
            h = flat[:, a:b]
            inputs = []
            for f in reversed(fs):
                inputs.append(h)
                h = blockwise_matvec(f, h) if self.blockwise else factor_matvec(f, h)
            saved.append(inputs)
            outs.append(h)
        if cache:
            self._saved = saved
        y = np.concatenate(outs, axis=1) if len(outs) > 1 else outs[0]
        return y.reshape(x.shape), np.full(n, self.log_det())

    def inverse(self, y, temperature=1.0, rng=None):
        n = y.shape[0]
        flat = y.reshape(n, self.dim)
        outs = []
        for (a, b), fs in zip(self._bounds(), self.factors):
            h = flat[:, a:b]
            for f in fs:
                h = blockwise_invert_apply(f, h) if self.blockwise else factor_matvec(
                    factor_invert(f), h
                )
            outs.append(h)
        x = np.concatenate(outs, axis=1) if len(outs) > 1 else outs[0]
        return x.reshape(y.shape)

    def backward(self, dy, weight):
        n = dy.shape[0]
        dflat = dy.reshape(n, self.dim)
        outs = []
        for j, ((a, b), fs, inputs) in enumerate(zip(self._bounds(), self.factors, self._saved)):
            d = dflat[:, a:b]
            k = len(fs)
            for step, f in enumerate(fs):
                x_in = inputs[k - 1 - step]
                if self.blockwise:
                    d, g = blockwise_vjp(f, x_in, d, weight * n)
                    for key, val in g.items():
                        self.grads[f"s{j}.f{step}.{key}"] += val
                else:
                    d, g = factor_vjp(f, x_in, d, weight * n)
                    self.grads[f"s{j}.f{step}.w"] += g
            outs.append(d)
        dx = np.concatenate(outs, axis=1) if len(outs) > 1 else outs[0]
        return dx.reshape(dy.shape)

    def dense(self) -> np.ndarray:
        """Dense matrix acting on the flattened sample (tests and verification)."""
        eye = np.eye(self.dim)
        y, _ = self.forward(eye.reshape((self.dim,) + self.in_shape))
        return y.reshape(self.dim, self.dim).T


class Coupling(Layer):
    """Affine coupling: ``y_b = sigmoid(raw + 2) * x_b + shift`` with ``(raw, shift) = nn(x_a)``."""

    kind = "coupling"

    def __init__(self, name, in_shape, hidden: int, rng=None):
        super().__init__(name, in_shape)
        c = self.channels
        if c % 2:
            raise InvalidArgumentError(f"coupling needs an even channel count, got {c}")
        self.ca = c // 2
        self.cb = c - self.ca
        rng = rng or np.random.default_rng(0)
        self.conv = len(in_shape) == 3
        if self.conv:
            self.net = nn.convnet(self.ca, hidden, 2 * self.cb, rng)
        else:
            n_a = self.sites * self.ca
            n_b = self.sites * self.cb
            self.net = nn.mlp(n_a, hidden, 2 * n_b, rng)
        self.params = self.net.params

    def zero_grad(self):
        self.net.zero_grad()

    @property
    def grads(self):
        return self.net.grads if hasattr(self, "net") else {}

    @grads.setter
    def grads(self, value):
        pass

    def _condition(self, xa):
        n = xa.shape[0]
        if self.conv:
            out = self.net.forward(xa)
            return out[..., : self.cb], out[..., self.cb :]
        out = self.net.forward(xa.reshape(n, -1))
        nb = out.shape[1] // 2
        shape = (n,) + self.in_shape[:-1] + (self.cb,)
        return out[:, :nb].reshape(shape), out[:, nb:].reshape(shape)

    def _net_backward(self, draw, dshift):
        n = draw.shape[0]
        if self.conv:
            return self.net.backward(np.concatenate([draw, dshift], axis=-1))
        d = np.concatenate([draw.reshape(n, -1), dshift.reshape(n, -1)], axis=1)
        return self.net.backward(d).reshape((n,) + self.in_shape[:-1] + (self.ca,))

    def forward(self, x, cache=False):
        xa, xb = x[..., : self.ca], x[..., self.ca :]
        raw, shift = self._condition(xa)
        u = raw + SCALE_OFFSET
        scale = _sigmoid(u)
        yb = scale * xb + shift
        ld = _log_sigmoid(u).reshape(x.shape[0], -1).sum(axis=1)
        if cache:
            self._saved = (xb, scale)
        return np.concatenate([xa, yb], axis=-1), ld

    def inverse(self, y, temperature=1.0, rng=None):
        ya, yb = y[..., : self.ca], y[..., self.ca :]
        raw, shift = self._condition(ya)
        scale = _sigmoid(raw + SCALE_OFFSET)
        return np.concatenate([ya, (yb - shift) / scale], axis=-1)

    def backward(self, dy, weight):
        xb, scale = self._saved
        dya, dyb = dy[..., : self.ca], dy[..., self.ca :]
        dxb = dyb * scale
        draw = dyb * xb * scale * (1.0 - scale) + weight * (1.0 - scale)
        dxa = dya + self._net_backward(draw, dyb)
        return np.concatenate([dxa, dxb], axis=-1)


class Squeeze(Layer):
    """Space-to-channel reshuffle.

    2-D: ``(H, W, C) -> (H/2, W/2, 4C)`` with output channel ``4c + q`` and
    quadrant ``q`` ordered top-left, top-right, bottom-left, bottom-right.
    1-D: ``(T, C) -> (T/2, 2C)`` with output channel ``2c + t``.
    """

    kind = "squeeze"

    def __init__(self, name, in_shape):
        super().__init__(name, in_shape)
        spatial = self.in_shape[:-1]
        if not spatial:
            raise InvalidArgumentError("squeeze needs spatial axes")
        if any(s % 2 for s in spatial):
            raise InvalidArgumentError(f"squeeze needs even spatial dims, got {spatial}")
        self.out_shape = tuple(s // 2 for s in spatial) + (
            self.channels * 2 ** len(spatial),
        )

    def forward(self, x, cache=False):
        return squeeze(x), np.zeros(x.shape[0])

    def inverse(self, y, temperature=1.0, rng=None):
        return unsqueeze(y)

    def backward(self, dy, weight):
        return unsqueeze(dy)


def squeeze(x: np.ndarray) -> np.ndarray:
    """Channel-last squeeze of a batch (see :class:`Squeeze`)."""
    if x.ndim == 3:
        n, t, c = x.shape
        if t % 2:
            raise InvalidArgumentError("odd length cannot be squeezed")
        return x.reshape(n, t // 2, 2, c).transpose(0, 1, 3, 2).reshape(n, t // 2, 2 * c)
    if x.ndim == 4:
        n, h, w, c = x.shape
        if h % 2 or w % 2:
            raise InvalidArgumentError("odd spatial dims cannot be squeezed")
        return (
            x.reshape(n, h // 2, 2, w // 2, 2, c)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(n, h // 2, w // 2, 4 * c)
        )
    raise InvalidArgumentError(f"cannot squeeze array of ndim {x.ndim}")


def unsqueeze(y: np.ndarray) -> np.ndarray:
    if y.ndim == 3:
        n, t, c = y.shape
        return y.reshape(n, t, c // 2, 2).transpose(0, 1, 3, 2).reshape(n, 2 * t, c // 2)
    if y.ndim == 4:
        n, h, w, c = y.shape
        return (
            y.reshape(n, h, w, c // 4, 2, 2)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(n, 2 * h, 2 * w, c // 4)
        )
    raise InvalidArgumentError(f"cannot unsqueeze array of ndim {y.ndim}")


class Split(Layer):
    """Factor out the second half of the channels under a conditional Gaussian."""

    kind = "split"

    def __init__(self, name, in_shape):
        super().__init__(name, in_shape)
        c = self.channels
        if c % 2:
            raise InvalidArgumentError(f"split needs an even channel count, got {c}")
        self.keep = c // 2
        self.out_shape = self.in_shape[:-1] + (self.keep,)
        self.conv = len(in_shape) == 3
        n_out = c - self.keep
        if self.conv:
            self.net = nn.Sequential([nn.Conv3x3(self.keep, 2 * n_out, zero=True)])
        else:
            self.net = nn.Sequential([nn.Dense(self.sites * self.keep, 2 * self.sites * n_out, zero=True)])
        self.params = self.net.params

    def zero_grad(self):
        self.net.zero_grad()

    @property
    def grads(self):
        return self.net.grads if hasattr(self, "net") else {}

    @grads.setter
    def grads(self, value):
        pass

    def _prior(self, xk):
        n = xk.shape[0]
        if self.conv:
            out = self.net.forward(xk)
            half = out.shape[-1] // 2
            return out[..., :half], out[..., half:]
        out = self.net.forward(xk.reshape(n, -1))
        half = out.shape[1] // 2
        shape = (n,) + self.in_shape[:-1] + (self.channels - self.keep,)
        return out[:, :half].reshape(shape), out[:, half:].reshape(shape)

    def forward(self, x, cache=False):
        xk, xo = x[..., : self.keep], x[..., self.keep :]
        mu, logsig = self._prior(xk)
        eps = (xo - mu) * np.exp(-logsig)
        lp = (-0.5 * LOG_2PI - logsig - 0.5 * eps**2).reshape(x.shape[0], -1).sum(axis=1)
        if cache:
            self._saved = (eps, logsig)
        self.last_eps = eps
        return xk, lp

    def inverse(self, y, temperature=1.0, rng=None, eps=None):
        mu, logsig = self._prior(y)
        if eps is None:
            rng = rng or np.random.default_rng()
            eps = temperature * rng.standard_normal(mu.shape) if temperature else np.zeros(mu.shape)
        return np.concatenate([y, mu + np.exp(logsig) * eps], axis=-1)

    def backward(self, dy, weight):
        eps, logsig = self._saved
        inv_sig = np.exp(-logsig)
        dxo = -weight * eps * inv_sig
        dmu = weight * eps * inv_sig
        dlogsig = weight * (eps**2 - 1.0)
        n = dy.shape[0]
        if self.conv:
            dk = self.net.backward(np.concatenate([dmu, dlogsig], axis=-1))
        else:
            d = np.concatenate([dmu.reshape(n, -1), dlogsig.reshape(n, -1)], axis=1)
            dk = self.net.backward(d).reshape(dy.shape)
        return np.concatenate([dy + dk, dxo], axis=-1)


def split_forward(layer: Split, x):
    return layer.forward(x)


def split_inverse(layer: Split, x_keep, noise=None, temperature=1.0, rng=None):
    return layer.inverse(x_keep, temperature, rng, eps=noise)


def actnorm_forward(layer: ActNorm, x):
    return layer.forward(x)


def actnorm_inverse(layer: ActNorm, y):
    return layer.inverse(y)


def coupling_forward(layer: Coupling, x):
    return layer.forward(x)


def coupling_inverse(layer: Coupling, y):
    return layer.inverse(y)


def to_internal(x: np.ndarray) -> np.ndarray:
    """Channel-first user layout -> channel-last internal layout."""
    if x.ndim <= 2:
        return x
    return np.moveaxis(x, 1, -1)


def to_external(x: np.ndarray) -> np.ndarray:
    if x.ndim <= 2:
        return x
    return np.moveaxis(x, -1, 1)


def internal_shape(shape: Sequence[int]) -> tuple:
    shape = tuple(int(s) for s in shape)
    return shape if len(shape) == 1 else shape[1:] + shape[:1]


class FlowModel:
    """Sequence of layers followed by a standard-normal prior on the final tensor.

    ``input_shape`` is the channel-first per-sample shape: ``(D,)``,
    ``(C, T)`` or ``(C, H, W)``.
    """

    def __init__(self, input_shape: Sequence[int], layers: list[Layer], config: dict | None = None):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.layers = layers
        self.config = dict(config or {})
        shape = internal_shape(self.input_shape)
        for layer in layers:
            if layer.in_shape != shape:
                raise ShapeMismatchError(
                    f"layer {layer.name} expects {layer.in_shape}, got {shape}"
                )
            shape = layer.out_shape
        self.prior_shape = shape

    @property
    def dim(self) -> int:
        return int(np.prod(self.input_shape))

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{l.name}.{k}": v for l in self.layers for k, v in l.params.items()}

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{l.name}.{k}": v for l in self.layers for k, v in l.buffers.items()}

    def gradients(self) -> dict[str, np.ndarray]:
        return {f"{l.name}.{k}": v for l in self.layers for k, v in l.grads.items()}

    def butterfly_names(self) -> set[str]:
        return {
            f"{l.name}.{k}" for l in self.layers if l.kind == "butterfly" for k in l.params
        }

    def actnorms(self) -> list[ActNorm]:
        return [l for l in self.layers if isinstance(l, ActNorm)]

    @property
    def initialized(self) -> bool:
        return all(a.initialized for a in self.actnorms())

    def mark_initialized(self):
        for a in self.actnorms():
            a.initialized = True

    def copy(self) -> "FlowModel":
        return copy.deepcopy(self)

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ShapeMismatchError(
                f"input shape {x.shape[1:]} does not match model shape {self.input_shape}"
            )
        return x

    def forward(self, x, cache=False):
        """Returns ``(z, log_p, per_layer)`` with ``per_layer`` a list of ``(name, contrib)``."""
        h = to_internal(self._check(x))
        total = np.zeros(h.shape[0])
        per_layer = []
        for layer in self.layers:
            h, c = layer.forward(h, cache)
            per_layer.append((layer.name, c))
            total = total + c
        prior = (-0.5 * LOG_2PI - 0.5 * h**2).reshape(h.shape[0], -1).sum(axis=1)
        per_layer.append(("prior", prior))
        return h, total + prior, per_layer

    def encode(self, x) -> np.ndarray:
        """Full standardized latent ``(N, D)``: every split's noise, then the final tensor.

        The map ``x -> encode(x)`` is a bijection with
        ``log_prob(x) = log N(encode(x); 0, I) + log|det d encode / dx|``.
        """
        h = to_internal(self._check(x))
        n = h.shape[0]
        parts = []
        for layer in self.layers:
            h, _ = layer.forward(h)
            if isinstance(layer, Split):
                parts.append(layer.last_eps.reshape(n, -1))
        parts.append(h.reshape(n, -1))
        return np.concatenate(parts, axis=1)

    def log_prob(self, x):
        _, lp, per_layer = self.forward(x)
        return lp, per_layer

    def inverse(self, z, temperature=1.0, rng=None):
        h = z
        for layer in reversed(self.layers):
            h = layer.inverse(h, temperature, rng)
        return to_external(h)

    def sample(self, n: int, seed=0, temperature: float = 1.0):
        rng = np.random.default_rng(seed)
        shape = (n,) + self.prior_shape
        z = temperature * rng.standard_normal(shape) if temperature else np.zeros(shape)
        return self.inverse(z, temperature, rng)

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def backward(self, x):
        """Negative mean log-likelihood and its exact gradients (into ``layer.grads``)."""
        x = self._check(x)
        n = x.shape[0]
        z, lp, per_layer = self.forward(x, cache=True)
        nll = -float(np.mean(lp))
        if not np.isfinite(nll):
            bad = next((name for name, c in per_layer if not np.all(np.isfinite(c))), None)
            raise NonFiniteLossError(f"non-finite log-probability in layer {bad}", bad)
        self.zero_grad()
        weight = -1.0 / n
        d = z / n
        for layer in reversed(self.layers):
            d = layer.backward(d, weight)
        return nll, self.gradients()


def model_log_prob(model: FlowModel, x):
    return model.log_prob(x)


def model_sample(model: FlowModel, n: int, seed=0, temperature: float = 1.0):
    return model.sample(n, seed, temperature)


def bits_per_dim(log_p, dim: int, n_bits: int) -> float:
    """Bits per dimension of ``n_bits`` data scaled to ``[0, 1)`` with uniform dequantization."""
    if dim <= 0:
        raise InvalidArgumentError("dim must be positive")
    return float((-np.asarray(log_p) / math.log(2.0) + dim * n_bits) / dim)


def format_bpd(bpd: float) -> str:
    """Two-decimal bits/dim readout, e.g. ``"3.33"``."""
    return f"{bpd:.2f}"


def nats_per_dim(log_p, dim: int) -> float:
    if dim <= 0:
        raise InvalidArgumentError("dim must be positive")
    return float(-np.asarray(log_p) / dim)


def _segment_plan(config, dim_l, level_idx, c):
    """Segment lengths and level schedules for the butterfly layers at one scale."""
    levels_cfg = config.get("butterfly_levels", 1)
    segments = config.get("segments")
    bidir = bool(config.get("bidirectional", False))
    if segments:
        div = 2**level_idx
        segs = [s // div for s in segments]
        m_list = list(levels_cfg) if isinstance(levels_cfg, (list, tuple)) else [levels_cfg] * len(segs)
    else:
        segs = [dim_l]
        m_list = [levels_cfg[0] if isinstance(levels_cfg, (list, tuple)) else levels_cfg]
    scheds = []
    for d, m in zip(segs, m_list):
        cap = max_level(d // c)
        m_l = min(int(m) - level_idx, cap)
        m_l = max(m_l, 1) if cap >= 1 else 0
        scheds.append(level_schedule(m_l, bidir))
    return segs, scheds


def build_model(config: dict, input_shape: Sequence[int]) -> FlowModel:
    """Multi-scale architecture: per scale ``[squeeze], K x (actnorm, butterfly, coupling), [split]``.

    Recognized keys: ``L``, ``K``, ``coupling_channels``, ``butterfly_levels``,
    ``segments``, ``bidirectional``, ``block_size``, ``init``, ``tied``,
    ``freeze_butterfly``, ``butterfly`` (False drops the layers) and ``seed``.
    """
    cfg = dict(config)
    n_levels = int(cfg.get("L", 1))
    k_steps = int(cfg.get("K", 1))
    hidden = int(cfg.get("coupling_channels", 32))
    c = int(cfg.get("block_size", 1))
    init = "identity" if cfg.get("freeze_butterfly") else cfg.get("init", "identity")
    tied = bool(cfg.get("tied", False))
    use_butterfly = cfg.get("butterfly", True)
    seeds = np.random.SeedSequence(int(cfg.get("seed", 0)))
    shape = internal_shape(input_shape)
    spatial = len(shape) > 1
    layers: list[Layer] = []
    for lvl in range(n_levels):
        if spatial:
            layers.append(Squeeze(f"L{lvl}.squeeze", shape))
            shape = layers[-1].out_shape
        dim_l = int(np.prod(shape))
        for k in range(k_steps):
            pre = f"L{lvl}.S{k}"
            layers.append(ActNorm(pre + ".actnorm", shape))
            # Spawned even when unused so coupling seeds do not depend on the
            # presence of butterfly layers (the ablation baseline shares them).
            fly_seed = seeds.spawn(1)[0]
            if use_butterfly:
                segs, scheds = _segment_plan(cfg, dim_l, lvl, c)
                if dim_l % c or not all(scheds):
                    raise InvalidArgumentError(
                        f"scale {lvl}: {dim_l} coordinates admit no butterfly with block size {c}"
                    )
                rng = np.random.default_rng(fly_seed)
                layers.append(
                    ButterflyStep(pre + ".butterfly", shape, scheds, segs if len(segs) > 1 else None, c, init, tied, rng)
                )
            rng = np.random.default_rng(seeds.spawn(1)[0])
            layers.append(Coupling(pre + ".coupling", shape, hidden, rng))
        if lvl < n_levels - 1:
            layers.append(Split(f"L{lvl}.split", shape))
            shape = layers[-1].out_shape
    return FlowModel(input_shape, layers, cfg)
