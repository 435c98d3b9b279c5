"""
Permutations and circulants as butterfly layers
===============================================

Two structured matrices that a stack of butterfly factors can express
exactly: any permutation of 2^k coordinates (switch-only factors, levels
going up then back down) and any circulant matrix (complex factors that
mimic the radix-2 FFT).
"""

import numpy as np

from bflow.butterfly import layer_apply, layer_to_dense
from bflow.circulant import circulant_matrix, circulant_to_butterfly
from bflow.permutation import is_switch_only, perm_decompose, permutation_matrix

rng = np.random.default_rng(0)

# A random shuffle of 16 coordinates.
perm = rng.permutation(16)
layer = perm_decompose(perm)
print("permutation      :", perm)
print("factor levels    :", layer.levels)
print("switch-only      :", is_switch_only(layer))
print("exact product    :", np.array_equal(layer_to_dense(layer), permutation_matrix(perm)))

# Each 2x2 block is either the identity or a swap; count the swaps per factor.
swaps = [int(np.sum(f.pair_weights()[..., 0, 1] == 1)) for f in layer.factors]
print("swaps per factor :", swaps)

# Applying the layer gathers: y[i] = x[perm[i]].
x = np.arange(16.0)
y, log_det = layer_apply(layer, x)
print("gathered         :", y.astype(int), "log|det| =", log_det)

# A circulant (circular convolution) with a random complex kernel.
kernel = rng.standard_normal(16) + 1j * rng.standard_normal(16)
circ = circulant_to_butterfly(kernel)
err = np.max(np.abs(layer_to_dense(circ) - circulant_matrix(kernel)))
print()
print("circulant factors:", len(circ.factors), " max |dense - C| =", f"{err:.2e}")
_, ld = layer_apply(circ, np.zeros(16, complex))
print("log|det| vs sum log|FFT(kernel)|:", ld, np.sum(np.log(np.abs(np.fft.fft(kernel)))))
