"""Self-checks against dense linear algebra and finite differences.

Each check returns a :class:`Check` with the largest observed error and the
tolerance it must stay under. ``run_suite`` collects them; the CLI prints the
rows as CSV.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .blockwise import (
    as_naive,
    blockwise_invert_apply,
    blockwise_log_det,
    blockwise_matvec,
    blockwise_new,
    blockwise_to_dense,
    onebyone_equivalent,
)
from .butterfly import (
    factor_invert,
    factor_log_det,
    factor_matvec,
    factor_new,
    factor_to_dense,
    layer_apply,
    layer_invert_apply,
    layer_new,
    layer_to_dense,
    max_level,
)
from .circulant import circulant_matrix, circulant_to_butterfly
from .flow import LOG_2PI, FlowModel, Split, build_model, to_external, to_internal
from .permutation import is_switch_only, perm_decompose, permutation_matrix

SUITES = ("core", "blockwise", "flow", "grad")


@dataclass
class Check:
    name: str
    max_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_err)) and self.max_err <= self.tol

    def csv_row(self) -> str:
        return f"{self.name},{self.max_err:.3e},{self.tol:.1e},{'pass' if self.passed else 'FAIL'}"


def _rel(a, b) -> float:
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


# -- core -----------------------------------------------------------------


def check_logdet(dims=(2, 4, 8, 16, 32, 64), n=10, seed=0) -> Check:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for d in dims:
        for lvl in range(1, max_level(d) + 1):
            for _ in range(n):
                f = factor_new(lvl, d, "rotation", rng)
                f.weights[...] *= rng.uniform(0.5, 2.0, f.weights.shape)
                ref = np.linalg.slogdet(factor_to_dense(f))[1]
                got = factor_log_det(f)[0]
                worst = max(worst, abs(got - ref) / max(1.0, abs(ref)))
    return Check("core.logdet_vs_dense", worst, 1e-10)


def check_inverse(dims=(2, 4, 8, 16, 32, 64), n=10, seed=1) -> Check:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for d in dims:
        for lvl in range(1, max_level(d) + 1):
            for _ in range(n):
                f = factor_new(lvl, d, "rotation", rng)
                f.weights[...] += 0.3 * rng.standard_normal(f.weights.shape)
                prod = factor_to_dense(f) @ factor_to_dense(factor_invert(f))
                worst = max(worst, float(np.max(np.abs(prod - np.eye(d)))))
    return Check("core.inverse_product", worst, 1e-10)


def check_layer(dims=(8, 32, 128), seed=2) -> Check:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for d in dims:
        layer = layer_new(d, max_level(d), "rotation", rng, bidirectional=True)
        for f in layer.factors:
            f.weights[...] += 0.2 * rng.standard_normal(f.weights.shape)
        x = rng.standard_normal((5, d))
        y, ld = layer_apply(layer, x)
        dense = layer_to_dense(layer)
        worst = max(worst, _rel(y, x @ dense.T))
        worst = max(worst, abs(ld - np.linalg.slogdet(dense)[1]) / max(1.0, abs(ld)))
        worst = max(worst, _rel(layer_invert_apply(layer, y), x))
    return Check("core.layer_apply_logdet_inverse", worst, 1e-10)


def check_permutations(dims=(4, 8, 16, 32, 64, 128), n=20, seed=3) -> Check:
    rng = np.random.default_rng(seed)
    bad = 0
    for d in dims:
        for _ in range(n):
            perm = rng.permutation(d)
            layer = perm_decompose(perm)
            if not is_switch_only(layer) or not np.array_equal(
                layer_to_dense(layer), permutation_matrix(perm)
            ):
                bad += 1
    return Check("core.permutation_exact", float(bad), 0.0)


def check_circulant(dims=(8, 32, 128, 1024), seed=4) -> Check:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for d in dims:
        k = rng.standard_normal(d) + 1j * rng.standard_normal(d)
        x = rng.standard_normal((3, d)) + 1j * rng.standard_normal((3, d))
        y, _ = layer_apply(circulant_to_butterfly(k), x)
        ref = np.fft.ifft(np.fft.fft(k) * np.fft.fft(x, axis=1), axis=1)
        worst = max(worst, float(np.max(np.abs(y - ref))))
        if d <= 128:
            worst = max(worst, float(np.max(np.abs(x @ circulant_matrix(k).T - ref))))
    return Check("core.circulant_vs_convolution", worst, 1e-8)


# -- blockwise ------------------------------------------------------------


def check_blockwise_dense(seed=5) -> Check:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for c in (1, 2, 4):
        for d in (4 * c, 16 * c):
            for lvl in range(1, max_level(d // c) + 1):
                f = blockwise_new(lvl, d, c, "rotation", rng)
                for v in f.params.values():
                    v += 0.2 * rng.standard_normal(v.shape)
                dense = blockwise_to_dense(f)
                x = rng.standard_normal((4, d))
                y = blockwise_matvec(f, x)
                worst = max(worst, _rel(y, x @ dense.T))
                ld = blockwise_log_det(f)
                worst = max(worst, abs(ld - np.linalg.slogdet(dense)[1]) / max(1.0, abs(ld)))
                worst = max(worst, _rel(blockwise_invert_apply(f, y), x))
    return Check("blockwise.matvec_logdet_inverse", worst, 1e-10)


def check_blockwise_c1(seed=6) -> Check:
    rng = np.random.default_rng(seed)
    mismatches = 0
    for d in (4, 16, 64):
        for lvl in range(1, max_level(d) + 1):
            f = blockwise_new(lvl, d, 1, "rotation", rng)
            for v in f.params.values():
                v += 0.2 * rng.standard_normal(v.shape)
            x = rng.standard_normal((3, d))
            if not np.array_equal(blockwise_matvec(f, x), factor_matvec(as_naive(f), x)):
                mismatches += 1
    return Check("blockwise.c1_equals_naive_bitwise", float(mismatches), 0.0)


def check_onebyone(seed=7) -> Check:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for c, g in ((2, 2), (3, 4), (4, 8)):
        w = rng.standard_normal((c, c))
        f = onebyone_equivalent(w, g)
        worst = max(worst, float(np.max(np.abs(blockwise_to_dense(f) - np.kron(np.eye(g), w)))))
    return Check("blockwise.onebyone_kronecker", worst, 1e-12)


# -- flow -----------------------------------------------------------------


def numerical_log_prob(model: FlowModel, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """log N(encode(x)) + log|det J| with J from central differences, one sample at a time."""
    out = np.empty(x.shape[0])
    for i in range(x.shape[0]):
        xi = x[i : i + 1].reshape(1, -1)
        d = xi.shape[1]
        jac = np.empty((d, d))
        for j in range(d):
            e = np.zeros((1, d))
            e[0, j] = h
            plus = model.encode((xi + e).reshape((1,) + model.input_shape))
            minus = model.encode((xi - e).reshape((1,) + model.input_shape))
            jac[:, j] = (plus - minus)[0] / (2 * h)
        z = model.encode(x[i : i + 1])
        out[i] = float(np.sum(-0.5 * LOG_2PI - 0.5 * z**2)) + np.linalg.slogdet(jac)[1]
    return out


FLOW_CASES = (
    (dict(L=2, K=2, coupling_channels=8, butterfly_levels=3, bidirectional=True, init="rot"), (8,)),
    (dict(L=2, K=2, coupling_channels=8, butterfly_levels=2, block_size=2, init="rot"), (16,)),
    (dict(L=2, K=1, coupling_channels=8, butterfly_levels=2, tied=True), (2, 8)),
    (dict(L=1, K=1, coupling_channels=4, butterfly_levels=2, block_size=4, init="rot"), (1, 4, 4)),
    (dict(L=1, K=2, coupling_channels=8, butterfly_levels=[2, 1], segments=[8, 4]), (12,)),
)


def _perturbed(cfg, shape, rng, scale=0.1):
    model = build_model({**cfg, "seed": int(rng.integers(1 << 30))}, shape)
    x = rng.standard_normal((6,) + tuple(shape))
    model.log_prob(x)
    for v in model.parameters().values():
        v += scale * rng.standard_normal(v.shape)
    return model, x


def check_change_of_variables(seed=8) -> Check:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for cfg, shape in FLOW_CASES:
        model, x = _perturbed(cfg, shape, rng)
        lp, _ = model.log_prob(x[:3])
        worst = max(worst, float(np.max(np.abs(lp - numerical_log_prob(model, x[:3])))))
    return Check("flow.log_prob_vs_numerical_jacobian", worst, 1e-6)


def check_flow_inverse(seed=9) -> Check:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for cfg, shape in FLOW_CASES:
        model, x = _perturbed(cfg, shape, rng)
        n = x.shape[0]
        # Re-derive the split noise so the inverse reproduces x exactly.
        h = to_internal(np.asarray(x, dtype=np.float64))
        eps = []
        for layer in model.layers:
            h, _ = layer.forward(h)
            if isinstance(layer, Split):
                eps.append(layer.last_eps)
        for layer in reversed(model.layers):
            if isinstance(layer, Split):
                h = layer.inverse(h, eps=eps.pop())
            else:
                h = layer.inverse(h)
        worst = max(worst, float(np.max(np.abs(to_external(h).reshape(n, -1) - x.reshape(n, -1)))))
    return Check("flow.inverse_roundtrip", worst, 1e-9)


def density_grid_mass(model: FlowModel, lim: float = 6.0, n: int = 400) -> float:
    """Integral of exp(log p) over [-lim, lim]^2 with the midpoint rule."""
    step = 2 * lim / n
    axis = -lim + step * (np.arange(n) + 0.5)
    xx, yy = np.meshgrid(axis, axis, indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    lp, _ = model.log_prob(pts)
    return float(np.sum(np.exp(lp)) * step * step)


def check_density_mass(seed=10) -> Check:
    rng = np.random.default_rng(seed)
    model = build_model(dict(L=1, K=4, coupling_channels=16, init="rot", seed=seed), (2,))
    model.log_prob(rng.standard_normal((256, 2)))
    for v in model.parameters().values():
        v += 0.1 * rng.standard_normal(v.shape)
    return Check("flow.density_integrates_to_one", abs(density_grid_mass(model) - 1.0), 1e-2)


# -- grad -----------------------------------------------------------------


def grad_check(model: FlowModel, x: np.ndarray, names=None, h: float = 1e-5) -> float:
    """Worst coordinate-wise error of analytic vs central-difference NLL gradients.

    The tolerance per coordinate is ``max(1e-5 * |a|, 1e-8)`` (relative with
    an absolute floor). The returned number is ``|a - n| / max(|a|, 1e-3)``,
    so comparing it against 1e-5 applies exactly that tolerance.
    """
    _, grads = model.backward(x)
    grads = {k: v.copy() for k, v in grads.items()}
    params = model.parameters()
    worst = 0.0
    for k in names if names is not None else params:
        v = params[k]
        num = np.zeros_like(v)
        for idx in np.ndindex(v.shape):
            orig = v[idx]
            v[idx] = orig + h
            fp = -float(np.mean(model.log_prob(x)[0]))
            v[idx] = orig - h
            fm = -float(np.mean(model.log_prob(x)[0]))
            v[idx] = orig
            num[idx] = (fp - fm) / (2 * h)
        a = grads[k]
        diff = np.abs(a - num)
        scale = np.maximum(np.abs(a), 1e-8 / 1e-5)
        worst = max(worst, float(np.max(diff / scale)) if diff.size else 0.0)
    return worst


GRAD_MODELS = {
    "naive": dict(L=2, K=2, coupling_channels=8, butterfly_levels=3, bidirectional=True, init="rot"),
    "blockwise": dict(L=2, K=2, coupling_channels=8, butterfly_levels=2, block_size=2, init="rot"),
}
LAYER_KINDS = ("actnorm", "butterfly", "blockwise", "coupling", "split")


def layer_kind_names(model: FlowModel, kind: str) -> list[str]:
    tag = "butterfly" if kind == "blockwise" else kind
    return [k for k in model.parameters() if f".{tag}." in k]


def check_gradients(points: int = 3, seed=11) -> list[Check]:
    rng = np.random.default_rng(seed)
    out = []
    for kind in LAYER_KINDS:
        cfg = GRAD_MODELS["blockwise" if kind == "blockwise" else "naive"]
        worst = 0.0
        for _ in range(points):
            model, x = _perturbed(cfg, (8,), rng)
            worst = max(worst, grad_check(model, x, layer_kind_names(model, kind)))
        out.append(Check(f"grad.{kind}", worst, 1e-5))
    return out


_SUITE_FUNCS: dict[str, list[Callable]] = {
    "core": [check_logdet, check_inverse, check_layer, check_permutations, check_circulant],
    "blockwise": [check_blockwise_dense, check_blockwise_c1, check_onebyone],
    "flow": [check_change_of_variables, check_flow_inverse, check_density_mass],
    "grad": [check_gradients],
}


def run_suite(name: str = "all") -> list[Check]:
    names = SUITES if name == "all" else (name,)
    if any(n not in _SUITE_FUNCS for n in names):
        raise ValueError(f"unknown suite {name!r}")
    out: list[Check] = []
    for n in names:
        for fn in _SUITE_FUNCS[n]:
            res = fn()
            out.extend(res if isinstance(res, list) else [res])
    return out
