"""Permutation routing onto switch-only butterfly layers.

Convention: a permutation ``perm`` acts as a gather, ``y[i] = x[perm[i]]``,
i.e. its matrix ``P`` has ``P[i, perm[i]] = 1`` and ``P @ x == x[perm]``.

The Beneš network built by the looping algorithm has stages at levels
``1, 2, ..., k, ..., 2, 1``. Its outer stage pairs ``j`` with ``j + D/2``,
which is exactly the level-1 butterfly pairing, and each half is routed
recursively by a level-2 stage acting on the two blocks, and so on down to
level ``k`` where adjacent coordinates are swapped.
"""

from __future__ import annotations

import numpy as np

from .butterfly import ButterflyFactor, ButterflyLayer, PairIndexing
from .errors import InvalidArgumentError

_IDENTITY = np.eye(2)
_SWAP = np.array([[0.0, 1.0], [1.0, 0.0]])


def permutation_matrix(perm) -> np.ndarray:
    perm = np.asarray(perm)
    out = np.zeros((perm.size, perm.size))
    out[np.arange(perm.size), perm] = 1.0
    return out


def _check_perm(perm) -> np.ndarray:
    perm = np.asarray(perm)
    if perm.ndim != 1 or not np.issubdtype(perm.dtype, np.integer):
        raise InvalidArgumentError("permutation must be a 1-D integer array")
    d = perm.size
    if d < 2 or d & (d - 1):
        raise InvalidArgumentError(f"permutation size {d} is not a power of two >= 2")
    if not np.array_equal(np.sort(perm), np.arange(d)):
        raise InvalidArgumentError("input is not a bijection on [0, D)")
    return perm.astype(np.intp)


def _route(src: np.ndarray) -> list[np.ndarray]:
    """Switch settings for a gather ``out[o] = in[src[o]]``.

    Returns one boolean array per stage (outer input stage first), each of
    length ``n/2`` in block-major order; ``True`` means the pair is swapped.
    """
    n = src.size
    if n == 2:
        return [np.array([src[0] == 1])]
    h = n // 2
    inv = np.empty(n, dtype=np.intp)
    inv[src] = np.arange(n)
    lower = np.full(n, -1, dtype=np.int8)  # per input: 1 routed through lower half
    out_sw = np.full(h, -1, dtype=np.int8)
    for start in range(h):
        if out_sw[start] >= 0:
            continue
        o = start
        out_sw[o] = 0  # output pair fed straight: output o takes the upper wire
        while True:
            s = src[o]
            lower[s] = 0
            partner = s + h if s < h else s - h
            lower[partner] = 1
            o2 = inv[partner]  # must be fed from the lower wire
            j = o2 % h
            if out_sw[j] >= 0:
                break
            out_sw[j] = 0 if o2 >= h else 1
            o = j + h if o2 < h else j  # the other output of that pair uses upper
    in_sw = lower[:h] == 1
    out_sw = out_sw.astype(bool)
    j = np.arange(h)
    up_out = np.where(out_sw, j + h, j)
    lo_out = np.where(out_sw, j, j + h)
    upper_stages = _route(src[up_out] % h)
    lower_stages = _route(src[lo_out] % h)
    inner = [np.concatenate([a, b]) for a, b in zip(upper_stages, lower_stages)]
    return [in_sw] + inner + [out_sw]


def _switch_factor(level: int, dim: int, swaps: np.ndarray) -> ButterflyFactor:
    idx = PairIndexing(level, dim)
    w = np.where(swaps.reshape(idx.n_blocks, idx.half, 1, 1), _SWAP, _IDENTITY)
    return ButterflyFactor(idx, w)


def perm_decompose(perm) -> ButterflyLayer:
    """Exact switch-only butterfly layer with dense form equal to ``P``.

    The layer has ``2k`` factors with levels ``1..k, k..1``; one of the two
    level-``k`` factors is the identity (the Beneš network needs ``2k-1``).
    """
    perm = _check_perm(perm)
    d = perm.size
    k = d.bit_length() - 1
    stages = _route(perm)  # application order, levels 1..k..1
    levels = list(range(1, k + 1)) + list(range(k - 1, 0, -1))
    applied = [_switch_factor(lvl, d, s) for lvl, s in zip(levels, stages)]
    # extra identity stage after the middle one gives levels 1..k, k..1
    applied.insert(k, _switch_factor(k, d, np.zeros(d // 2, dtype=bool)))
    return ButterflyLayer(d, applied[::-1], bidirectional=True)


def is_switch_only(layer: ButterflyLayer) -> bool:
    """True iff every pair block is exactly ``I_2`` or the swap matrix."""
    for f in layer.factors:
        w = f.weights
        eye = np.all(w == _IDENTITY, axis=(-1, -2))
        swap = np.all(w == _SWAP, axis=(-1, -2))
        if not np.all(eye | swap):
            return False
    return True
