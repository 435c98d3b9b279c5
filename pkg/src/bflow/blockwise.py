"""Block-wise invertible butterfly factors.

Coordinates are grouped into ``G = D / C`` contiguous groups of ``C``.
Groups are paired with the level-``i`` butterfly rule on ``G`` and each
group pair ``(P, Q)`` is mixed by the ``2C x 2C`` block-LDU transform

    M = [[I, 0], [X, I]] @ [[Y, 0], [0, Z]] @ [[I, W], [0, I]]
      = [[Y, Y W], [X Y, X Y W + Z]]

with ``Y = P_y L_y (U_y + diag(sign_y * exp(logs_y)))`` and likewise for
``Z``. ``det M = det Y det Z`` never vanishes, and the log-determinant is
just the sum of the ``logs`` entries.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .butterfly import ButterflyFactor, PairIndexing
from .errors import InvalidArgumentError

PARAM_NAMES = ("X", "W", "Ly", "Uy", "logs_y", "Lz", "Uz", "logs_z")
BUFFER_NAMES = ("Py", "sign_y", "Pz", "sign_z")


@dataclass
class BlockwiseFactor:
    indexing: PairIndexing  # over groups
    block_size: int
    params: dict
    buffers: dict
    tied: bool = False

    @property
    def level(self) -> int:
        return self.indexing.level

    @property
    def dim(self) -> int:
        return self.indexing.dim * self.block_size

    def lead(self) -> tuple[int, int]:
        return (1, 1) if self.tied else (self.indexing.n_blocks, self.indexing.half)


@functools.lru_cache(maxsize=None)
def _masks(c: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Strict-lower mask, strict-upper mask and identity (read-only, shared)."""
    out = (np.tri(c, k=-1), np.tri(c, k=-1).T.copy(), np.eye(c))
    for m in out:
        m.setflags(write=False)
    return out


def lu_realize(P, L, U, logs, sign) -> np.ndarray:
    """``P @ (I + strict_lower(L)) @ (strict_upper(U) + diag(sign * exp(logs)))``."""
    lo, up, eye = _masks(L.shape[-1])
    lower = L * lo + eye
    upper = U * up + _diag(sign * np.exp(logs))
    return P @ lower @ upper


def _diag(v: np.ndarray) -> np.ndarray:
    return v[..., :, None] * np.eye(v.shape[-1])


def lu_params(m: np.ndarray) -> tuple[np.ndarray, ...]:
    """Glow-style LU parameters ``(P, L, U, logs, sign)`` of an invertible matrix."""
    p, l, u = scipy.linalg.lu(m)
    d = np.diag(u)
    if np.any(d == 0):
        raise InvalidArgumentError("matrix is singular and has no LU parameterization")
    return p, l, np.triu(u, 1), np.log(np.abs(d)), np.sign(d)


def _random_rotation(rng: np.random.Generator, c: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((c, c)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def blockwise_new(
    level: int,
    dim: int,
    block_size: int,
    init: str = "identity",
    seed: int | np.random.Generator | None = 0,
) -> BlockwiseFactor:
    """Create a block-wise factor; ``rotation`` init draws random rotations for Y and Z."""
    c = int(block_size)
    if c < 1 or dim % c:
        raise InvalidArgumentError(f"block size {c} does not divide dim {dim}")
    groups = dim // c
    if groups < 2 or groups % (2**level):
        raise InvalidArgumentError(
            f"group count {groups} is not divisible by 2**level={2**level}"
        )
    idx = PairIndexing(level, groups)
    lead = (idx.n_blocks, idx.half)
    zeros = np.zeros(lead + (c, c))
    params = {name: zeros.copy() for name in ("X", "W", "Ly", "Uy", "Lz", "Uz")}
    params["logs_y"] = np.zeros(lead + (c,))
    params["logs_z"] = np.zeros(lead + (c,))
    eye = np.broadcast_to(np.eye(c), lead + (c, c)).copy()
    buffers = {
        "Py": eye,
        "Pz": eye.copy(),
        "sign_y": np.ones(lead + (c,)),
        "sign_z": np.ones(lead + (c,)),
    }
    if init in ("rotation", "rot"):
        rng = np.random.default_rng(seed)
        for tag in ("y", "z"):
            for a in range(lead[0]):
                for b in range(lead[1]):
                    p, l, u, logs, sign = lu_params(_random_rotation(rng, c))
                    buffers["P" + tag][a, b] = p
                    buffers["sign_" + tag][a, b] = sign
                    params["L" + tag][a, b] = l
                    params["U" + tag][a, b] = u
                    params["logs_" + tag][a, b] = logs
    elif init not in ("identity", "id"):
        raise InvalidArgumentError(f"unknown init {init!r}")
    return BlockwiseFactor(idx, c, params, buffers)


def realize_blocks(f: BlockwiseFactor) -> dict:
    """The realized ``Y``, ``Z`` and pair blocks ``A, B, C, D`` of ``M``."""
    p, b = f.params, f.buffers
    y = lu_realize(b["Py"], p["Ly"], p["Uy"], p["logs_y"], b["sign_y"])
    z = lu_realize(b["Pz"], p["Lz"], p["Uz"], p["logs_z"], b["sign_z"])
    yw = y @ p["W"]
    return {"Y": y, "Z": z, "A": y, "B": yw, "C": p["X"] @ y, "D": p["X"] @ yw + z}


def _groups(f: BlockwiseFactor, x: np.ndarray) -> np.ndarray:
    if x.shape[-1] != f.dim:
        raise InvalidArgumentError(f"input length {x.shape[-1]} != factor dim {f.dim}")
    idx = f.indexing
    return x.reshape(x.shape[:-1] + (idx.n_blocks, 2, idx.half, f.block_size))


def _mv(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``m @ v`` per group: ``m`` is ``(..., C, C)``, ``v`` is ``(batch..., ..., C)``."""
    c = m.shape[-1]
    if c > 8:
        return np.matmul(m, v[..., None])[..., 0]
    # Tiny blocks: C fused multiply-adds over whole arrays beat per-group matmuls.
    out = m[..., :, 0] * v[..., 0, None]
    for j in range(1, c):
        out += m[..., :, j] * v[..., j, None]
    return out


def blockwise_matvec(f: BlockwiseFactor, x: np.ndarray, blocks: dict | None = None) -> np.ndarray:
    x = np.asarray(x)
    g = _groups(f, x)
    blk = realize_blocks(f) if blocks is None else blocks
    xp, xq = g[..., 0, :, :], g[..., 1, :, :]
    y = np.empty(g.shape, dtype=np.result_type(x, blk["A"]))
    y[..., 0, :, :] = _mv(blk["A"], xp) + _mv(blk["B"], xq)
    y[..., 1, :, :] = _mv(blk["C"], xp) + _mv(blk["D"], xq)
    return y.reshape(x.shape)


def blockwise_log_det(f: BlockwiseFactor) -> float:
    mult = f.indexing.n_blocks * f.indexing.half if f.tied else 1
    return float(mult * (np.sum(f.params["logs_y"]) + np.sum(f.params["logs_z"])))


def _solve_unit_lower(L: np.ndarray, v: np.ndarray) -> np.ndarray:
    c = v.shape[-1]
    out = np.empty(np.broadcast_shapes(L.shape[:-1], v.shape), dtype=v.dtype)
    for k in range(c):
        out[..., k] = v[..., k] - np.sum(L[..., k, :k] * out[..., :k], axis=-1)
    return out


def _solve_upper(U: np.ndarray, diag: np.ndarray, v: np.ndarray) -> np.ndarray:
    c = v.shape[-1]
    out = np.empty(np.broadcast_shapes(U.shape[:-1], v.shape), dtype=v.dtype)
    for k in range(c - 1, -1, -1):
        rest = np.sum(U[..., k, k + 1 :] * out[..., k + 1 :], axis=-1)
        out[..., k] = (v[..., k] - rest) / diag[..., k]
    return out


def _lu_solve(P, L, U, logs, sign, v):
    lo, up, _ = _masks(L.shape[-1])
    w = _mv(np.swapaxes(P, -1, -2), v)
    w = _solve_unit_lower(L * lo, w)
    return _solve_upper(U * up, sign * np.exp(logs), w)


def blockwise_invert_apply(f: BlockwiseFactor, z: np.ndarray) -> np.ndarray:
    """Exact inverse via the block-LDU form and two triangular solves per LU block."""
    z = np.asarray(z)
    g = _groups(f, z)
    p, b = f.params, f.buffers
    yp, yq = g[..., 0, :, :], g[..., 1, :, :]
    uq = yq - _mv(p["X"], yp)
    tp = _lu_solve(b["Py"], p["Ly"], p["Uy"], p["logs_y"], b["sign_y"], yp)
    xq = _lu_solve(b["Pz"], p["Lz"], p["Uz"], p["logs_z"], b["sign_z"], uq)
    xp = tp - _mv(p["W"], xq)
    out = np.empty(g.shape, dtype=np.result_type(z, xp))
    out[..., 0, :, :] = xp
    out[..., 1, :, :] = xq
    return out.reshape(z.shape)


def blockwise_to_dense(f: BlockwiseFactor) -> np.ndarray:
    idx, c = f.indexing, f.block_size
    lead = (idx.n_blocks, idx.half)
    blk = {k: np.broadcast_to(v, lead + (c, c)) for k, v in realize_blocks(f).items()}
    out = np.zeros((f.dim, f.dim))
    p_groups, q_groups = idx.pairs()
    for n, (gp, gq) in enumerate(zip(p_groups, q_groups)):
        a, j = divmod(n, idx.half)
        sp, sq = slice(gp * c, gp * c + c), slice(gq * c, gq * c + c)
        out[sp, sp] = blk["A"][a, j]
        out[sp, sq] = blk["B"][a, j]
        out[sq, sp] = blk["C"][a, j]
        out[sq, sq] = blk["D"][a, j]
    return out


def onebyone_equivalent(weights: np.ndarray, groups: int) -> BlockwiseFactor:
    """Level-1 factor with ``X = W = 0`` and ``Y = Z = weights`` tied across pairs.

    Its dense form is ``kron(I_groups, weights)``: a 1x1 convolution over
    ``C`` channels at ``groups`` positions.
    """
    weights = np.asarray(weights, dtype=np.float64)
    c = weights.shape[0]
    if weights.shape != (c, c):
        raise InvalidArgumentError("weights must be square")
    P, L, U, logs, sign = lu_params(weights)
    idx = PairIndexing(1, groups)
    lead = (1, 1)
    params = {
        "X": np.zeros(lead + (c, c)),
        "W": np.zeros(lead + (c, c)),
        "Ly": L[None, None].copy(),
        "Uy": U[None, None].copy(),
        "logs_y": logs[None, None].copy(),
        "Lz": L[None, None].copy(),
        "Uz": U[None, None].copy(),
        "logs_z": logs[None, None].copy(),
    }
    buffers = {
        "Py": P[None, None].copy(),
        "Pz": P[None, None].copy(),
        "sign_y": sign[None, None].copy(),
        "sign_z": sign[None, None].copy(),
    }
    return BlockwiseFactor(idx, c, params, buffers, tied=True)


def as_naive(f: BlockwiseFactor) -> ButterflyFactor:
    """Naive factor with the same realized weights; requires ``block_size == 1``."""
    if f.block_size != 1:
        raise InvalidArgumentError("only block_size == 1 factors have a naive form")
    blk = realize_blocks(f)
    lead = f.lead()
    w = np.empty(lead + (2, 2))
    w[..., 0, 0] = blk["A"][..., 0, 0]
    w[..., 0, 1] = blk["B"][..., 0, 0]
    w[..., 1, 0] = blk["C"][..., 0, 0]
    w[..., 1, 1] = blk["D"][..., 0, 0]
    if f.tied:
        w = np.broadcast_to(w, (f.indexing.n_blocks, f.indexing.half, 2, 2)).copy()
    return ButterflyFactor(f.indexing, w)


def blockwise_vjp(f: BlockwiseFactor, x: np.ndarray, dy: np.ndarray, log_det_weight: float = 0.0):
    """Cotangents of ``blockwise_matvec`` plus ``log_det_weight * log|det|``.

    ``x`` and ``dy`` have shape ``(..., D)``; returns ``(dx, grads)`` with
    ``grads`` keyed like ``f.params``.
    """
    p, b = f.params, f.buffers
    blk = realize_blocks(f)
    g, dg = _groups(f, x), _groups(f, dy)
    xp, xq = g[..., 0, :, :], g[..., 1, :, :]
    dp, dq = dg[..., 0, :, :], dg[..., 1, :, :]
    dx = np.empty(g.shape)
    tr = lambda m: np.swapaxes(m, -1, -2)  # noqa: E731
    dx[..., 0, :, :] = _mv(tr(blk["A"]), dp) + _mv(tr(blk["C"]), dq)
    dx[..., 1, :, :] = _mv(tr(blk["B"]), dp) + _mv(tr(blk["D"]), dq)

    tail = xp.shape[-3:]

    def outer(u, v):
        # sum over the batch of u v^T, as one batched matmul contracting the batch axis
        u = u.reshape((-1,) + tail)
        v = v.reshape((-1,) + tail)
        return np.matmul(np.moveaxis(u, 0, -1), np.moveaxis(v, 0, -2))

    gA, gB = outer(dp, xp), outer(dp, xq)
    gC, gD = outer(dq, xp), outer(dq, xq)
    X, W, Y = p["X"], p["W"], blk["Y"]
    gY = gA + gB @ tr(W) + tr(X) @ gC + tr(X) @ gD @ tr(W)
    grads = {
        "W": tr(Y) @ gB + tr(X @ Y) @ gD,
        "X": gC @ tr(Y) + gD @ tr(Y @ W),
    }
    gZ = gD
    for tag, gm in (("y", gY), ("z", gZ)):
        P, L, U = b["P" + tag], p["L" + tag], p["U" + tag]
        logs, sign = p["logs_" + tag], b["sign_" + tag]
        lo, up, eye = _masks(L.shape[-1])
        lower = L * lo + eye
        upper = U * up + _diag(sign * np.exp(logs))
        gl = tr(P) @ gm @ tr(upper)
        gu = tr(lower) @ tr(P) @ gm
        grads["L" + tag] = gl * lo
        grads["U" + tag] = gu * up
        grads["logs_" + tag] = np.diagonal(gu, axis1=-2, axis2=-1) * sign * np.exp(logs) + log_det_weight
    if f.tied:
        for k in grads:
            grads[k] = grads[k].sum(axis=(0, 1), keepdims=True)
    return dx.reshape(x.shape), grads
