"""Seeded synthetic datasets, dequantization, batching and the ``bfdata`` file format.

All generators are pure functions of their arguments. Random streams come
from the counter-based Philox bit generator; train, validation and test
splits draw from separately spawned streams of the same seed sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import InvalidArgumentError

_MAGIC = "bfdata v1"


def _rng(seed) -> np.random.Generator:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(ss))


def _streams(seed: int, n: int) -> list[np.random.Generator]:
    return [_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


@dataclass
class Dataset:
    kind: str
    shape: tuple
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int
    n_bits: int = 0
    perm: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return int(np.prod(self.shape))

    def split(self, name: str) -> np.ndarray:
        if name not in ("train", "val", "test"):
            raise InvalidArgumentError(f"unknown split {name!r}")
        return getattr(self, name)

    def unscramble(self, x: np.ndarray) -> np.ndarray:
        """Undo the dataset-wide pixel permutation on flattened samples."""
        if self.perm is None:
            raise InvalidArgumentError("dataset has no stored permutation")
        flat = x.reshape(x.shape[0], -1)
        out = np.empty_like(flat)
        out[:, self.perm] = flat
        return out.reshape(x.shape)


def _sizes(n, n_val, n_test):
    if n < 1:
        raise InvalidArgumentError("n must be >= 1")
    n_val = max(1, n // 4) if n_val is None else n_val
    n_test = max(1, n // 4) if n_test is None else n_test
    return n, n_val, n_test


def _two_rings(rng, n, noise):
    radius = rng.choice([1.0, 2.0], size=n)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    eps = np.clip(rng.normal(0.0, noise, size=n), -3 * noise, 3 * noise)
    r = radius + eps
    return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)


def _moons(rng, n, noise):
    upper = rng.random(n) < 0.5
    t = rng.uniform(0.0, np.pi, size=n)
    x = np.where(upper, np.cos(t), 1.0 - np.cos(t))
    y = np.where(upper, np.sin(t), 0.5 - np.sin(t))
    return np.stack([x, y], axis=1) + rng.normal(0.0, noise, size=(n, 2))


def _checkerboard(rng, n, noise):
    x1 = rng.uniform(-2.0, 2.0, size=n)
    x2 = rng.uniform(0.0, 1.0, size=n) + rng.integers(0, 2, size=n) * 2.0 - 2.0
    x2 = x2 + np.where(np.floor(x1) % 2 == 0, 1.0, 0.0)
    return np.stack([x1, x2], axis=1)


_TOY = {"two_rings": _two_rings, "moons": _moons, "checkerboard": _checkerboard}


def toy2d(
    kind: str = "two_rings",
    n: int = 10000,
    seed: int = 0,
    noise: float = 0.05,
    normalize: bool = True,
    n_val: int | None = None,
    n_test: int | None = None,
) -> Dataset:
    """2-D point clouds; normalized with the train split's mean and std.

    ``two_rings`` has radii 1 and 2 with radial Gaussian noise truncated at 3 std.
    """
    if kind not in _TOY:
        raise InvalidArgumentError(f"unknown toy dataset {kind!r}")
    sizes = _sizes(n, n_val, n_test)
    parts = [_TOY[kind](r, m, noise) for r, m in zip(_streams(seed, 3), sizes)]
    meta = {}
    if normalize:
        mean, std = parts[0].mean(axis=0), parts[0].std(axis=0)
        parts = [(p - mean) / std for p in parts]
        meta = {"mean": mean, "std": std}
    return Dataset(kind, (2,), *parts, seed=seed, meta=meta)


def banded_mixing(dim: int, coeffs=(0.9, 0.5)) -> np.ndarray:
    a = np.eye(dim)
    for k, c in enumerate(coeffs, start=1):
        a += c * np.eye(dim, k=-k)
    return a


def _is_pow2(d: int) -> bool:
    return d >= 2 and not d & (d - 1)


def permuted_gaussian(
    dim: int = 16,
    seed: int = 0,
    n: int = 10000,
    permute: bool = True,
    n_val: int | None = None,
    n_test: int | None = None,
) -> Dataset:
    """``x = P A eps`` with banded ``A`` and one dataset-wide permutation ``P``."""
    if not _is_pow2(dim):
        raise InvalidArgumentError(f"dim {dim} is not a power of two")
    sizes = _sizes(n, n_val, n_test)
    perm_rng, *split_rngs = _streams(seed, 4)
    perm = perm_rng.permutation(dim) if permute else np.arange(dim)
    a = banded_mixing(dim)
    parts = [(r.standard_normal((m, dim)) @ a.T)[:, perm] for r, m in zip(split_rngs, sizes)]
    cov = a @ a.T
    meta = {"mixing": a, "cov": cov[np.ix_(perm, perm)]}
    return Dataset("permuted_gaussian", (dim,), *parts, seed=seed, perm=perm, meta=meta)


def gaussian_entropy_per_dim(cov: np.ndarray) -> float:
    """Differential entropy per coordinate of ``N(0, cov)`` in nats."""
    d = cov.shape[0]
    _, logdet = np.linalg.slogdet(2.0 * np.pi * math.e * cov)
    return 0.5 * logdet / d


def gaussian_log_prob(x: np.ndarray, cov: np.ndarray) -> np.ndarray:
    d = cov.shape[0]
    chol = np.linalg.cholesky(cov)
    sol = np.linalg.solve(chol, x.T)
    return -0.5 * np.sum(sol**2, axis=0) - np.sum(np.log(np.diag(chol))) - 0.5 * d * math.log(2 * math.pi)


def periodic_signals(
    rng, n, length, channels, noise, harmonics, freqs
) -> np.ndarray:
    t = np.arange(length) / length
    f = rng.choice(np.asarray(freqs), size=n)
    amp = rng.uniform(0.5, 1.0, size=(n, channels, harmonics)) / np.arange(1, harmonics + 1)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=(n, channels, harmonics))
    h = np.arange(1, harmonics + 1)
    arg = 2.0 * np.pi * (h[None, None, :, None] * f[:, None, None, None]) * t + phase[..., None]
    x = np.sum(amp[..., None] * np.sin(arg), axis=2)
    if noise:
        x = x + noise * rng.standard_normal(x.shape)
    return x


def periodic1d(
    length: int = 64,
    channels: int = 2,
    n: int = 4000,
    seed: int = 0,
    noise: float = 0.02,
    harmonics: int = 3,
    freqs=(2, 3, 4),
    normalize: bool = True,
    n_val: int | None = None,
    n_test: int | None = None,
) -> Dataset:
    """Multi-harmonic periodic signals of shape ``(channels, length)``.

    Each sample draws one fundamental (cycles per window) shared by its
    channels; values are min-max scaled to ``[-1, 1]`` over all splits.
    """
    if not _is_pow2(length):
        raise InvalidArgumentError(f"length {length} is not a power of two")
    sizes = _sizes(n, n_val, n_test)
    parts = [
        periodic_signals(r, m, length, channels, noise, harmonics, freqs)
        for r, m in zip(_streams(seed, 3), sizes)
    ]
    meta = {}
    if normalize:
        lo = min(p.min() for p in parts)
        hi = max(p.max() for p in parts)
        parts = [2.0 * (p - lo) / (hi - lo) - 1.0 for p in parts]
        meta = {"min": lo, "max": hi}
    return Dataset("periodic1d", (channels, length), *parts, seed=seed, meta=meta)


def _patterns(rng, n, side):
    img = np.zeros((n, side, side), dtype=np.int64)
    for i in range(n):
        for _ in range(rng.integers(1, 3)):
            val = int(rng.integers(64, 256))
            if rng.random() < 0.5:
                h, w = rng.integers(1, side // 2 + 1, size=2)
                r, c = rng.integers(0, side - h + 1), rng.integers(0, side - w + 1)
                img[i, r : r + h, c : c + w] = val
            else:
                r, c = rng.integers(0, side, size=2)
                img[i, r, :] = val
                img[i, :, c] = val
    return img[:, None]


def permuted_patterns(
    side: int = 8,
    n: int = 4000,
    seed: int = 0,
    permute: bool = True,
    dequantize_data: bool = True,
    n_val: int | None = None,
    n_test: int | None = None,
) -> Dataset:
    """8-bit rectangle/cross images with one dataset-wide pixel permutation.

    ``meta["raw"]`` keeps the permuted integer splits before dequantization.
    """
    if not _is_pow2(side):
        raise InvalidArgumentError(f"side {side} is not a power of two")
    sizes = _sizes(n, n_val, n_test)
    perm_rng, *rngs = _streams(seed, 7)
    d = side * side
    perm = perm_rng.permutation(d) if permute else np.arange(d)
    raw = [_patterns(r, m, side).reshape(m, d)[:, perm].reshape(m, 1, side, side) for r, m in zip(rngs[:3], sizes)]
    if dequantize_data:
        parts = [dequantize(x, 8, r) for x, r in zip(raw, rngs[3:6])]
    else:
        parts = [x.astype(np.float64) for x in raw]
    meta = {"raw": raw}
    return Dataset("permuted_patterns", (1, side, side), *parts, seed=seed, n_bits=8, perm=perm, meta=meta)


def dequantize(x_int, n_bits: int, seed=0) -> np.ndarray:
    """``(x + u) / 2**n_bits`` with ``u ~ Uniform[0, 1)``."""
    x_int = np.asarray(x_int)
    top = 2**n_bits
    if np.any(x_int < 0) or np.any(x_int >= top):
        raise InvalidArgumentError(f"values outside [0, {top})")
    rng = seed if isinstance(seed, np.random.Generator) else _rng(seed)
    return (x_int + rng.random(x_int.shape)) / top


def batch_iter(x: np.ndarray, batch_size: int, seed: int = 0, epoch: int = 0) -> Iterator[np.ndarray]:
    """One shuffled epoch of full batches; the partial last batch is dropped."""
    n = x.shape[0]
    order = _rng(np.random.SeedSequence([seed, epoch])).permutation(n)
    for b in range(n // batch_size):
        yield x[order[b * batch_size : (b + 1) * batch_size]]


def standard_normal(dim: int = 8, n: int = 4000, seed: int = 0, n_val: int | None = None, n_test: int | None = None) -> Dataset:
    """i.i.d. N(0, I) samples; the exact entropy is ``0.5 * log(2 pi e)`` nats per dimension."""
    sizes = _sizes(n, n_val, n_test)
    splits = [g.standard_normal((m, dim)) for g, m in zip(_streams(seed, 3), sizes)]
    return Dataset("standard_normal", (dim,), *splits, seed)


def from_file(path, n_bits: int = 0, seed: int = 0) -> Dataset:
    """Wrap a ``bfdata`` file as a dataset whose three splits are the whole file."""
    kind, x = load_bfdata(path)
    x.setflags(write=False)
    return Dataset(f"file:{kind}", x.shape[1:], x, x, x, seed, n_bits)


_GENERATORS = {
    "file": from_file,
    "standard_normal": standard_normal,
    "two_rings": lambda **kw: toy2d("two_rings", **kw),
    "moons": lambda **kw: toy2d("moons", **kw),
    "checkerboard": lambda **kw: toy2d("checkerboard", **kw),
    "permuted_gaussian": permuted_gaussian,
    "periodic1d": periodic1d,
    "permuted_patterns": permuted_patterns,
}


def _coerce(v: str):
    for conv in (int, float):
        try:
            return conv(v)
        except ValueError:
            pass
    if v.lower() in ("true", "false"):
        return v.lower() == "true"
    return v


def parse_dataset_spec(spec) -> dict:
    """``"kind:key=val,key=val"`` or a mapping with a ``kind`` key."""
    if isinstance(spec, dict):
        if "kind" not in spec:
            raise InvalidArgumentError("dataset spec needs a 'kind'")
        return dict(spec)
    kind, _, rest = str(spec).partition(":")
    out = {"kind": kind.strip()}
    for item in filter(None, rest.split(",")):
        key, sep, val = item.partition("=")
        if not sep:
            raise InvalidArgumentError(f"malformed dataset option {item!r}")
        out[key.strip()] = _coerce(val.strip())
    return out


def make_dataset(spec, seed: int | None = None) -> Dataset:
    opts = parse_dataset_spec(spec)
    kind = opts.pop("kind")
    if kind not in _GENERATORS:
        raise InvalidArgumentError(f"unknown dataset kind {kind!r}")
    if seed is not None:
        opts.setdefault("seed", seed)
    try:
        return _GENERATORS[kind](**opts)
    except TypeError as exc:
        raise InvalidArgumentError(f"bad options for {kind}: {exc}") from None


def save_bfdata(path, kind: str, x: np.ndarray) -> None:
    x = np.ascontiguousarray(x, dtype="<f8")
    shape = "x".join(str(s) for s in x.shape[1:]) or "1"
    with open(path, "wb") as fh:
        fh.write(f"{_MAGIC} {kind} {shape} {x.shape[0]}\n".encode("ascii"))
        fh.write(x.tobytes())


def load_bfdata(path) -> tuple[str, np.ndarray]:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        payload = fh.read()
    if len(header) != 5 or " ".join(header[:2]) != _MAGIC:
        raise InvalidArgumentError(f"{path}: not a bfdata v1 file")
    kind, shape, n = header[2], tuple(int(s) for s in header[3].split("x")), int(header[4])
    x = np.frombuffer(payload, dtype="<f8")
    if x.size != n * int(np.prod(shape)):
        raise InvalidArgumentError(f"{path}: payload size does not match header")
    return kind, x.reshape((n,) + shape).astype(np.float64)
