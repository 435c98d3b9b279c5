"""Circulant (1-D periodic convolution) matrices as complex butterfly layers.

With ``F`` the DFT matrix, a circulant satisfies ``C = F^-1 diag(F k) F``.
The radix-2 decimation-in-time FFT factors ``F = S_top ... S_1 R`` where
``R`` is the bit-reversal permutation and ``S_s`` is the stage of span
``2**s``; a stage of span ``m`` pairs ``j`` with ``j + m/2`` inside blocks
of size ``m``, i.e. it is a butterfly factor of level ``k - s + 1``.
"""

from __future__ import annotations

import numpy as np

from .butterfly import (
    ButterflyFactor,
    ButterflyLayer,
    PairIndexing,
    factor_invert,
)
from .errors import InvalidArgumentError
from .permutation import perm_decompose


def bit_reversal(d: int) -> np.ndarray:
    bits = d.bit_length() - 1
    idx = np.arange(d)
    rev = np.zeros(d, dtype=np.intp)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def dit_stage(d: int, span: int) -> ButterflyFactor:
    """FFT stage combining sub-transforms of length ``span // 2``."""
    level = d.bit_length() - span.bit_length() + 1
    idx = PairIndexing(level, d)
    tw = np.exp(-2j * np.pi * np.arange(span // 2) / span)
    w = np.empty((idx.n_blocks, idx.half, 2, 2), dtype=np.complex128)
    w[..., 0, 0] = 1.0
    w[..., 0, 1] = tw
    w[..., 1, 0] = 1.0
    w[..., 1, 1] = -tw
    return ButterflyFactor(idx, w)


def circulant_matrix(kernel) -> np.ndarray:
    """Dense ``C[i, j] = kernel[(i - j) mod D]``."""
    k = np.asarray(kernel)
    d = k.size
    i, j = np.indices((d, d))
    return k[(i - j) % d]


def circulant_to_butterfly(kernel) -> ButterflyLayer:
    """Complex butterfly layer whose dense form is ``circulant_matrix(kernel)``.

    Applied order: bit reversal, the ``k`` FFT stages with the spectrum
    ``fft(kernel)`` folded into the last one, the inverse stages in reverse,
    and bit reversal again. Bit reversals are switch-only Beneš layers.
    """
    k = np.asarray(kernel, dtype=np.complex128)
    d = k.size
    if d < 2 or d & (d - 1):
        raise InvalidArgumentError(f"kernel length {d} is not a power of two >= 2")
    n_stages = d.bit_length() - 1
    bitrev = perm_decompose(bit_reversal(d)).factors  # definition order
    bitrev = [
        ButterflyFactor(f.indexing, f.weights.astype(np.complex128)) for f in bitrev
    ]
    stages = [dit_stage(d, 2**s) for s in range(1, n_stages + 1)]
    inverses = [factor_invert(f) for f in stages]

    spectrum = np.fft.fft(k)
    last = stages[-1]
    p, q = last.indexing.pairs()
    w = last.weights.copy()
    w[..., 0, :] *= spectrum[p].reshape(w.shape[:2])[..., None]
    w[..., 1, :] *= spectrum[q].reshape(w.shape[:2])[..., None]
    scaled = ButterflyFactor(last.indexing, w)

    applied_fwd = stages[:-1] + [scaled]
    applied_inv = inverses[::-1]
    # definition order is the reverse of application order
    factors = bitrev + applied_inv[::-1] + applied_fwd[::-1] + bitrev
    return ButterflyLayer(d, factors)
