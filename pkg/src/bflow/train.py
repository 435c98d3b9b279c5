"""Maximum-likelihood training: Adam, warmup/decay schedule, parameter EMA."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import Dataset, batch_iter
from .errors import NonFiniteGradientError, NonFiniteLossError
from .flow import FlowModel, bits_per_dim

log = logging.getLogger(__name__)

DEFAULTS = {
    "lr": 1e-3,
    "warmup_iters": 10,
    "lr_decay": 0.999997,
    "butterfly_lr_gamma": None,
    "batch_size": 64,
    "max_iters": 1000,
    "ema": "none",
    "ema_decay": 0.999,
    "grad_clip": 50.0,
    "eval_every": 0,
    "eval_batch": 1024,
    "freeze_butterfly": False,
    "seed": 0,
    "n_bits": 0,
}
MAX_BAD_STEPS = 5


@dataclass
class LrSchedule:
    base: float = 1e-3
    warmup_iters: int = 10
    gamma: float = 0.999997


def lr_at(schedule: LrSchedule, t: int) -> float:
    """Linear warmup from 0 over ``warmup_iters`` steps, then per-step exponential decay."""
    warm = 1.0 if schedule.warmup_iters <= 0 else min(1.0, t / schedule.warmup_iters)
    return schedule.base * warm * schedule.gamma ** max(0, t - schedule.warmup_iters)


@dataclass
class AdamState:
    names: list
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict, names=None, **kw) -> "AdamState":
        names = list(params) if names is None else list(names)
        st = cls(names, **kw)
        st.m = {k: np.zeros_like(params[k]) for k in names}
        st.v = {k: np.zeros_like(params[k]) for k in names}
        return st


def adam_step(state: AdamState, params: dict, grads: dict, lr: float) -> dict:
    """In-place bias-corrected Adam update of ``params[name]`` for the state's names."""
    for k in state.names:
        if not np.all(np.isfinite(grads[k])):
            raise NonFiniteGradientError(f"non-finite gradient for {k}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for k in state.names:
        g = grads[k]
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        params[k] -= lr * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + state.eps)
    return params


@dataclass
class EmaState:
    mode: str = "none"
    decay: float = 0.999
    shadow: dict = field(default_factory=dict)

    @classmethod
    def for_model(cls, model: FlowModel, mode: str = "none", decay: float = 0.999) -> "EmaState":
        if mode not in ("none", "all", "butterfly", "separate"):
            raise ValueError(f"unknown ema mode {mode!r}")
        params = model.parameters()
        if mode == "all":
            names = list(params)
        elif mode in ("butterfly", "separate"):
            names = sorted(model.butterfly_names())
        else:
            names = []
        return cls(mode, decay, {k: params[k].copy() for k in names})


def ema_update(ema: EmaState, params: dict) -> EmaState:
    g = ema.decay
    for k, s in ema.shadow.items():
        s *= g
        s += (1.0 - g) * params[k]
    return ema


def ema_apply(ema: EmaState, model: FlowModel) -> FlowModel:
    """Copy of ``model`` with shadow values substituted; ``model`` is untouched."""
    if not ema.shadow:
        return model
    out = model.copy()
    params = out.parameters()
    for k, s in ema.shadow.items():
        params[k][...] = s
    return out


def backward(model: FlowModel, x) -> tuple[float, dict]:
    return model.backward(x)


def clip_global_norm(grads: dict, names, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(grads[k] ** 2)) for k in names))
    if max_norm and total > max_norm:
        scale = max_norm / total
        for k in names:
            grads[k] *= scale
    return total


def evaluate(model: FlowModel, x: np.ndarray, batch: int = 1024) -> float:
    """Mean log-probability over ``x`` (chunked)."""
    total = 0.0
    for a in range(0, x.shape[0], batch):
        lp, _ = model.log_prob(x[a : a + batch])
        total += float(np.sum(lp))
    return total / x.shape[0]


class TrainingAborted(NonFiniteLossError):
    def __init__(self, message, layer=None, metrics=None):
        super().__init__(message, layer)
        self.metrics = metrics or []


def _metric(it, split, mean_lp, dim, n_bits, lr, t0):
    nll = -mean_lp / dim
    return {
        "iter": it,
        "split": split,
        "nll_nats_per_dim": nll,
        "bpd": bits_per_dim(mean_lp, dim, n_bits) if n_bits else None,
        "lr": lr,
        "elapsed_ms": (time.perf_counter() - t0) * 1e3,
    }


def train_loop(
    model: FlowModel,
    dataset: Dataset,
    config: dict,
    start_iter: int = 0,
    callback: Callable[[int, FlowModel], None] | None = None,
    ema: EmaState | None = None,
):
    """Train ``model`` in place; returns ``(model, metrics)``.

    Iterations run over seeded epoch shuffles of the train split. With
    ``freeze_butterfly`` the butterfly parameters are never updated. Every
    ``eval_every`` iterations (and at the end) the validation NLL is logged,
    using the EMA shadow parameters when EMA is enabled. Pass ``ema`` to
    continue an existing average (when resuming); the state in use is left
    on ``model.ema``.
    """
    cfg = {**DEFAULTS, **{k: v for k, v in config.items() if v is not None}}
    max_iters = int(cfg["max_iters"])
    metrics: list[dict] = []
    if ema is None:
        ema = EmaState.for_model(model, cfg["ema"], float(cfg["ema_decay"]))
    model.ema = ema
    if max_iters <= start_iter:
        return model, metrics
    n_bits = int(cfg.get("n_bits") or dataset.n_bits or 0)
    dim = dataset.dim
    bs = int(cfg["batch_size"])
    if dataset.train.shape[0] < bs:
        raise ValueError("train split smaller than one batch")
    seed = int(cfg["seed"])

    params = model.parameters()
    fly = model.butterfly_names()
    rest = [k for k in params if k not in fly]
    fly_names = [] if cfg["freeze_butterfly"] else [k for k in params if k in fly]
    base = LrSchedule(float(cfg["lr"]), int(cfg["warmup_iters"]), float(cfg["lr_decay"]))
    fly_gamma = cfg["butterfly_lr_gamma"] or cfg["lr_decay"]
    fly_sched = LrSchedule(float(cfg["lr"]), int(cfg["warmup_iters"]), float(fly_gamma))
    groups = [(AdamState.for_params(params, rest), base)]
    if fly_names:
        groups.append((AdamState.for_params(params, fly_names), fly_sched))
    trainable = rest + fly_names

    def batches():
        epoch = 0
        while True:
            yield from batch_iter(dataset.train, bs, seed, epoch)
            epoch += 1

    stream = batches()
    t0 = time.perf_counter()
    if not model.initialized:
        model.log_prob(dataset.train[:bs] if start_iter == 0 else next(stream))
    bad = 0
    it = start_iter
    for it in range(start_iter + 1, max_iters + 1):
        x = next(stream)
        lr = lr_at(base, it)
        try:
            nll, grads = model.backward(x)
            if not all(np.all(np.isfinite(grads[k])) for k in trainable):
                raise NonFiniteGradientError("non-finite gradient")
        except (NonFiniteLossError, NonFiniteGradientError) as exc:
            bad += 1
            log.warning("iteration %d: %s", it, exc)
            metrics.append(_metric(it, "train", -math.inf, dim, n_bits, lr, t0))
            if bad >= MAX_BAD_STEPS:
                raise TrainingAborted(
                    f"{bad} consecutive non-finite iterations (last: {exc})",
                    getattr(exc, "layer", None),
                    metrics,
                ) from exc
            continue
        bad = 0
        clip_global_norm(grads, trainable, float(cfg["grad_clip"]))
        for state, sched in groups:
            adam_step(state, params, grads, lr_at(sched, it))
        ema_update(ema, params)
        metrics.append(_metric(it, "train", -nll, dim, n_bits, lr, t0))
        every = int(cfg["eval_every"])
        if every and it % every == 0 and it != max_iters:
            lp = evaluate(ema_apply(ema, model), dataset.val, int(cfg["eval_batch"]))
            metrics.append(_metric(it, "val", lp, dim, n_bits, lr, t0))
        if callback is not None:
            callback(it, model)
    lp = evaluate(ema_apply(ema, model), dataset.val, int(cfg["eval_batch"]))
    metrics.append(_metric(it, "val", lp, dim, n_bits, lr_at(base, it), t0))
    return model, metrics
