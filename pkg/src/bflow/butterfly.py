"""Scalar-weight butterfly factors and layers.

A level-``i`` factor on ``D`` coordinates splits the index range into
``2**(i-1)`` contiguous blocks of size ``D / 2**(i-1)`` and couples the
coordinates ``m * block + j`` and ``m * block + block // 2 + j`` through an
independent 2x2 matrix. Every operation here (apply, log-determinant,
inverse) therefore costs O(D).

Weights are stored as an array of shape ``(n_blocks, w, 2, 2)`` where
``w == half`` for free weights and ``w == 1`` for tied weights (one 2x2
matrix shared by every pair in a block).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError, SingularFactorError

_DET_FLOOR = 1e-300
FIELDS = {"real64": np.float64, "complex128": np.complex128}


@dataclass(frozen=True)
class PairIndexing:
    level: int
    dim: int

    def __post_init__(self):
        if self.level < 1:
            raise InvalidArgumentError(f"level must be >= 1, got {self.level}")
        if self.dim < 2 or self.dim % (2**self.level):
            raise InvalidArgumentError(
                f"dim={self.dim} is not divisible by 2**level={2**self.level}"
            )

    @property
    def n_blocks(self) -> int:
        return 2 ** (self.level - 1)

    @property
    def block_size(self) -> int:
        return self.dim // self.n_blocks

    @property
    def half(self) -> int:
        return self.block_size // 2

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """Return index arrays ``(p, q)`` of the D/2 coupled pairs, block-major."""
        m = np.arange(self.n_blocks)[:, None] * self.block_size
        j = np.arange(self.half)[None, :]
        p = (m + j).ravel()
        return p, p + self.half


def max_level(dim: int) -> int:
    """Largest level ``i`` with ``dim % 2**i == 0``."""
    if dim < 2:
        return 0
    return (dim & -dim).bit_length() - 1


@dataclass
class ButterflyFactor:
    indexing: PairIndexing
    weights: np.ndarray
    tied: bool = False

    def __post_init__(self):
        w = self.tied_width
        expected = (self.indexing.n_blocks, w, 2, 2)
        if self.weights.shape != expected:
            raise InvalidArgumentError(
                f"weights shape {self.weights.shape} != expected {expected}"
            )

    @property
    def level(self) -> int:
        return self.indexing.level

    @property
    def dim(self) -> int:
        return self.indexing.dim

    @property
    def tied_width(self) -> int:
        return 1 if self.tied else self.indexing.half

    def pair_weights(self) -> np.ndarray:
        """Per-pair 2x2 blocks, shape ``(n_blocks, half, 2, 2)``."""
        return np.broadcast_to(
            self.weights, (self.indexing.n_blocks, self.indexing.half, 2, 2)
        )

    def pair_dets(self) -> np.ndarray:
        w = self.weights
        return w[..., 0, 0] * w[..., 1, 1] - w[..., 0, 1] * w[..., 1, 0]


def factor_new(
    level: int,
    dim: int,
    init: str = "identity",
    seed: int | np.random.Generator | None = 0,
    tied: bool = False,
    field: str = "real64",
) -> ButterflyFactor:
    """Create a level-``level`` factor on ``dim`` coordinates.

    ``init="rotation"`` draws one angle per stored 2x2 block uniformly from
    (-pi, pi] and sets the block to the corresponding rotation.
    """
    indexing = PairIndexing(level, dim)
    if field not in FIELDS:
        raise InvalidArgumentError(f"unknown scalar field {field!r}")
    width = 1 if tied else indexing.half
    shape = (indexing.n_blocks, width)
    weights = np.zeros(shape + (2, 2), dtype=FIELDS[field])
    if init in ("identity", "id"):
        weights[..., 0, 0] = 1.0
        weights[..., 1, 1] = 1.0
    elif init in ("rotation", "rot"):
        rng = np.random.default_rng(seed)
        phi = np.pi - rng.uniform(0.0, 2.0 * np.pi, size=shape)
        c, s = np.cos(phi), np.sin(phi)
        weights[..., 0, 0] = c
        weights[..., 0, 1] = -s
        weights[..., 1, 0] = s
        weights[..., 1, 1] = c
    else:
        raise InvalidArgumentError(f"unknown init {init!r}")
    return ButterflyFactor(indexing, weights, tied)


def _split_pairs(x: np.ndarray, indexing: PairIndexing) -> np.ndarray:
    if x.shape[-1] != indexing.dim:
        raise InvalidArgumentError(
            f"input length {x.shape[-1]} does not match factor dim {indexing.dim}"
        )
    return x.reshape(x.shape[:-1] + (indexing.n_blocks, 2, indexing.half))


def _apply_blocks(w: np.ndarray, x: np.ndarray, indexing: PairIndexing) -> np.ndarray:
    xs = _split_pairs(x, indexing)
    x0, x1 = xs[..., 0, :], xs[..., 1, :]
    y = np.empty(xs.shape, dtype=np.result_type(w, x))
    y[..., 0, :] = w[..., 0, 0] * x0 + w[..., 0, 1] * x1
    y[..., 1, :] = w[..., 1, 0] * x0 + w[..., 1, 1] * x1
    return y.reshape(x.shape[:-1] + (indexing.dim,))


def factor_matvec(f: ButterflyFactor, x: np.ndarray) -> np.ndarray:
    """Apply ``f`` to the trailing axis of ``x`` (batched over leading axes)."""
    x = np.asarray(x)
    return _apply_blocks(f.weights, x, f.indexing)


def factor_rmatvec(f: ButterflyFactor, y: np.ndarray) -> np.ndarray:
    """Apply the transpose of ``f`` (not conjugated)."""
    wt = np.swapaxes(f.weights, -1, -2)
    return _apply_blocks(wt, np.asarray(y), f.indexing)


def factor_log_det(f: ButterflyFactor) -> tuple[float, complex | float]:
    """Return ``(log|det|, sign)``; ``(-inf, 0)`` if any pair is singular.

    For complex factors ``sign`` is the unit-modulus phase of the determinant.
    """
    dets = f.pair_dets()
    mult = f.indexing.half if f.tied else 1
    mags = np.abs(dets)
    if np.any(mags == 0):
        return -np.inf, 0.0
    log_abs = float(mult * np.sum(np.log(mags)))
    if np.iscomplexobj(dets):
        phase = float(mult * np.sum(np.angle(dets)))
        return log_abs, complex(np.exp(1j * phase))
    negatives = int(np.count_nonzero(dets < 0)) * mult
    return log_abs, -1.0 if negatives % 2 else 1.0


def factor_invert(f: ButterflyFactor) -> ButterflyFactor:
    """Pairwise 2x2 inverse; the result has the same level and indexing."""
    dets = f.pair_dets()
    bad = np.flatnonzero(np.abs(dets) < _DET_FLOOR)
    if bad.size:
        b = int(bad[0])
        width = f.tied_width
        pair = (b // width) * f.indexing.half + (b % width)
        raise SingularFactorError(
            f"pair {pair} of level-{f.level} factor has zero determinant", pair
        )
    w = f.weights
    inv = np.empty_like(w)
    inv[..., 0, 0] = w[..., 1, 1] / dets
    inv[..., 0, 1] = -w[..., 0, 1] / dets
    inv[..., 1, 0] = -w[..., 1, 0] / dets
    inv[..., 1, 1] = w[..., 0, 0] / dets
    return ButterflyFactor(f.indexing, inv, f.tied)


def factor_to_dense(f: ButterflyFactor) -> np.ndarray:
    p, q = f.indexing.pairs()
    w = f.pair_weights().reshape(-1, 2, 2)
    out = np.zeros((f.dim, f.dim), dtype=w.dtype)
    out[p, p] = w[:, 0, 0]
    out[p, q] = w[:, 0, 1]
    out[q, p] = w[:, 1, 0]
    out[q, q] = w[:, 1, 1]
    return out


def level_schedule(max_lvl: int, bidirectional: bool = False) -> list[int]:
    """Levels in definition order: ``1..M`` or ``1..M, M..1``."""
    up = list(range(1, max_lvl + 1))
    return up + up[::-1] if bidirectional else up


@dataclass
class ButterflyLayer:
    """Composition ``b_{a1} o b_{a2} o ... o b_{ak}``.

    ``factors`` is kept in definition order, so the LAST factor is applied first.
    """

    dim: int
    factors: list[ButterflyFactor] = field(default_factory=list)
    bidirectional: bool = False

    def __post_init__(self):
        for f in self.factors:
            if f.dim != self.dim:
                raise InvalidArgumentError(
                    f"factor dim {f.dim} does not match layer dim {self.dim}"
                )

    @property
    def levels(self) -> list[int]:
        return [f.level for f in self.factors]


def layer_new(
    dim: int,
    levels: Sequence[int] | int,
    init: str = "identity",
    seed: int | np.random.Generator | np.random.SeedSequence | None = 0,
    tied: bool = False,
    field: str = "real64",
    bidirectional: bool = False,
) -> ButterflyLayer:
    """Build a layer; an integer ``levels`` means the schedule ``1..M``.

    ``seed`` may also be a SeedSequence, or a Generator whose stream is then consumed.
    """
    if isinstance(levels, (int, np.integer)):
        schedule = level_schedule(int(levels), bidirectional)
    else:
        schedule = list(levels)
    if isinstance(seed, np.random.Generator):
        seed = int(seed.integers(1 << 62))
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    seeds = root.spawn(len(schedule))
    factors = [
        factor_new(lvl, dim, init, np.random.default_rng(s), tied, field)
        for lvl, s in zip(schedule, seeds)
    ]
    return ButterflyLayer(dim, factors, bidirectional)


def layer_apply(l: ButterflyLayer, x: np.ndarray) -> tuple[np.ndarray, float]:
    x = np.asarray(x)
    if x.shape[-1] != l.dim:
        raise InvalidArgumentError(f"input length {x.shape[-1]} != layer dim {l.dim}")
    log_det = 0.0
    for f in reversed(l.factors):
        x = factor_matvec(f, x)
        log_det += factor_log_det(f)[0]
    return x, log_det


def layer_invert(l: ButterflyLayer) -> ButterflyLayer:
    """Layer realizing the inverse map (inverted factors, reversed order)."""
    return ButterflyLayer(l.dim, [factor_invert(f) for f in reversed(l.factors)])


def layer_invert_apply(l: ButterflyLayer, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z)
    if z.shape[-1] != l.dim:
        raise InvalidArgumentError(f"input length {z.shape[-1]} != layer dim {l.dim}")
    for f in l.factors:
        z = factor_matvec(factor_invert(f), z)
    return z


def layer_to_dense(l: ButterflyLayer) -> np.ndarray:
    dtype = np.result_type(*[f.weights for f in l.factors]) if l.factors else np.float64
    out = np.eye(l.dim, dtype=dtype)
    for f in l.factors:
        out = out @ factor_to_dense(f)
    return out


@dataclass
class SegmentedLayer:
    """Independent butterfly layers on contiguous slices of the input."""

    segments: tuple[int, ...]
    layers: list[ButterflyLayer]

    def __post_init__(self):
        self.segments = tuple(int(s) for s in self.segments)
        if len(self.segments) != len(self.layers):
            raise InvalidArgumentError("one layer per segment required")
        for d, l in zip(self.segments, self.layers):
            if l.dim != d:
                raise InvalidArgumentError(f"segment length {d} != layer dim {l.dim}")

    @property
    def dim(self) -> int:
        return sum(self.segments)

    def bounds(self) -> list[tuple[int, int]]:
        ends = np.cumsum(self.segments)
        return [(int(e - d), int(e)) for d, e in zip(self.segments, ends)]


def segmented_new(
    segments: Sequence[int],
    levels: Sequence[int],
    init: str = "identity",
    seed: int | None = 0,
    tied: bool = False,
    bidirectional: bool = False,
) -> SegmentedLayer:
    seeds = np.random.SeedSequence(seed).spawn(len(segments))
    layers = [
        layer_new(d, m, init, s, tied, bidirectional=bidirectional)
        for d, m, s in zip(segments, levels, seeds)
    ]
    return SegmentedLayer(tuple(segments), layers)


def _check_len(s: SegmentedLayer, x: np.ndarray):
    if x.shape[-1] != s.dim:
        raise InvalidArgumentError(
            f"input length {x.shape[-1]} != total segment length {s.dim}"
        )


def segmented_apply(s: SegmentedLayer, x: np.ndarray) -> tuple[np.ndarray, float]:
    x = np.asarray(x)
    _check_len(s, x)
    parts, log_det = [], 0.0
    for (a, b), l in zip(s.bounds(), s.layers):
        y, ld = layer_apply(l, x[..., a:b])
        parts.append(y)
        log_det += ld
    return np.concatenate(parts, axis=-1), log_det


def segmented_invert_apply(s: SegmentedLayer, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z)
    _check_len(s, z)
    parts = [layer_invert_apply(l, z[..., a:b]) for (a, b), l in zip(s.bounds(), s.layers)]
    return np.concatenate(parts, axis=-1)


def segmented_to_dense(s: SegmentedLayer) -> np.ndarray:
    out = np.zeros((s.dim, s.dim))
    for (a, b), l in zip(s.bounds(), s.layers):
        out[a:b, a:b] = layer_to_dense(l)
    return out


def factor_vjp(
    f: ButterflyFactor, x: np.ndarray, dy: np.ndarray, log_det_weight: float = 0.0
) -> tuple[np.ndarray, np.ndarray]:
    """Cotangents of ``factor_matvec(f, x)`` plus ``log_det_weight * log|det f|``.

    Uses ``d log|ad - bc| / d(a, b, c, d) = (d, -c, -b, a) / (ad - bc)``.
    Returns ``(dx, dweights)`` with ``dweights`` shaped like ``f.weights``.
    """
    idx = f.indexing
    xs, ds = _split_pairs(np.asarray(x), idx), _split_pairs(np.asarray(dy), idx)
    xs = xs.reshape((-1,) + xs.shape[-3:])
    ds = ds.reshape((-1,) + ds.shape[-3:])
    dw = np.einsum("nmai,nmbi->miab", ds, xs)
    if log_det_weight:
        w = f.pair_weights()
        det = w[..., 0, 0] * w[..., 1, 1] - w[..., 0, 1] * w[..., 1, 0]
        cof = np.stack(
            [np.stack([w[..., 1, 1], -w[..., 1, 0]], -1), np.stack([-w[..., 0, 1], w[..., 0, 0]], -1)],
            -2,
        )
        dw = dw + log_det_weight * cof / det[..., None, None]
    if f.tied:
        dw = dw.sum(axis=1, keepdims=True)
    return factor_rmatvec(f, dy), dw
