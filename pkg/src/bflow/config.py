"""Run configuration: one JSON object mirroring the architecture-table columns."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Any

from .butterfly import max_level
from .data import parse_dataset_spec


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class RunConfig:
    dataset: Any = field(default_factory=lambda: {"kind": "two_rings", "n": 10000})
    seed: int = 0
    L: int = 1
    K: int = 8
    coupling_channels: int = 64
    butterfly_levels: Any = 1
    segments: list | None = None
    bidirectional: bool = False
    block_size: int = 1
    init: str = "id"
    tied: bool = False
    ema: str = "none"
    ema_decay: float = 0.999
    butterfly_lr_gamma: float | None = None
    lr: float = 1e-3
    warmup_iters: int = 10
    lr_decay: float = 0.999997
    batch_size: int = 64
    max_iters: int = 1000
    n_bits: int = 0
    freeze_butterfly: bool = False
    eval_every: int = 500
    ckpt_every: int = 0
    grad_clip: float = 50.0

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown configuration key")
        cfg = cls(**d)
        cfg.dataset = parse_dataset_spec(cfg.dataset)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError("<file>", f"invalid JSON: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError("<file>", "top level must be an object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)


def dataset_shape(spec) -> tuple:
    """Per-sample (channel-first) shape implied by a dataset spec, without generating it."""
    s = parse_dataset_spec(spec)
    kind = s["kind"]
    if kind in ("two_rings", "moons", "checkerboard"):
        return (2,)
    if kind in ("permuted_gaussian", "standard_normal"):
        return (int(s.get("dim", 16 if kind == "permuted_gaussian" else 8)),)
    if kind == "periodic1d":
        return (int(s.get("channels", 2)), int(s.get("length", 64)))
    if kind == "permuted_patterns":
        side = int(s.get("side", 8))
        return (1, side, side)
    if kind == "file":
        try:
            with open(s["path"], "rb") as fh:
                header = fh.readline().decode("ascii").split()
            return tuple(int(v) for v in header[3].split("x"))
        except (OSError, IndexError, ValueError, KeyError):
            raise ConfigError("dataset", f"cannot read bfdata header from {s.get('path')!r}") from None
    raise ConfigError("dataset", f"unknown dataset kind {kind!r}")


def _positive(cfg, name, allow_zero=False):
    v = getattr(cfg, name)
    if not isinstance(v, (int, float)) or isinstance(v, bool) or v < 0 or (v == 0 and not allow_zero):
        raise ConfigError(name, f"must be a {'non-negative' if allow_zero else 'positive'} number, got {v!r}")


def validate(cfg: RunConfig, input_shape: tuple | None = None) -> tuple:
    """Check every divisibility constraint the model would hit; returns the input shape."""
    shape = tuple(input_shape) if input_shape is not None else dataset_shape(cfg.dataset)
    for name in ("L", "coupling_channels", "block_size", "batch_size", "lr"):
        _positive(cfg, name)
    for name in ("K", "max_iters", "warmup_iters", "eval_every", "ckpt_every", "n_bits", "grad_clip"):
        _positive(cfg, name, allow_zero=True)
    for name in ("lr_decay", "ema_decay"):
        v = getattr(cfg, name)
        if not 0.0 <= v <= 1.0:
            raise ConfigError(name, f"must lie in [0, 1], got {v}")
    if cfg.butterfly_lr_gamma is not None and not 0.0 < cfg.butterfly_lr_gamma <= 1.0:
        raise ConfigError("butterfly_lr_gamma", "must lie in (0, 1]")
    if cfg.init not in ("id", "rot", "identity", "rotation"):
        raise ConfigError("init", f"must be 'id' or 'rot', got {cfg.init!r}")
    if cfg.ema not in ("none", "all", "butterfly", "separate"):
        raise ConfigError("ema", f"must be none/all/butterfly, got {cfg.ema!r}")

    n_scales = cfg.L
    if len(shape) == 1:
        d0 = shape[0]
        if d0 % (2**n_scales):
            raise ConfigError("L", f"flat dimension {d0} must be divisible by 2**L={2**n_scales}")
    else:
        for s in shape[1:]:
            if s % (2**n_scales):
                raise ConfigError("L", f"spatial size {s} must be divisible by 2**L={2**n_scales}")
    d0 = 1
    for s in shape:
        d0 *= s

    c = cfg.block_size
    if d0 % c:
        raise ConfigError("block_size", f"block size {c} does not divide dimension {d0}")
    for lvl in range(n_scales):
        d_l = d0 // (2**lvl)
        if d_l % c or (d_l // c) % 2:
            raise ConfigError(
                "block_size", f"scale {lvl}: {d_l} coordinates do not form an even number of groups of {c}"
            )

    levels = cfg.butterfly_levels
    if cfg.segments:
        if c != 1:
            raise ConfigError("segments", "segments require block_size 1")
        if not isinstance(levels, list) or len(levels) != len(cfg.segments):
            raise ConfigError("butterfly_levels", "needs one level per segment")
        if sum(cfg.segments) != d0:
            raise ConfigError("segments", f"segment lengths sum to {sum(cfg.segments)}, not {d0}")
        for seg, m in zip(cfg.segments, levels):
            if seg % (2 ** (n_scales - 1)) or (seg >> (n_scales - 1)) < 2:
                raise ConfigError("segments", f"segment {seg} cannot be halved at every scale")
            if not isinstance(m, int) or m < 1 or m > max_level(seg):
                raise ConfigError("butterfly_levels", f"level {m} invalid for segment length {seg}")
    else:
        if isinstance(levels, list):
            if len(levels) != 1:
                raise ConfigError("butterfly_levels", "a list requires matching segments")
            levels = levels[0]
        if not isinstance(levels, int) or levels < 1:
            raise ConfigError("butterfly_levels", f"must be a positive integer, got {levels!r}")
        if (d0 // c) % (2**levels):
            raise ConfigError(
                "butterfly_levels",
                f"{d0 // c} groups are not divisible by 2**{levels}",
            )
    return shape


def model_config(cfg: RunConfig) -> dict:
    """Keys consumed by :func:`bflow.flow.build_model`."""
    d = cfg.to_dict()
    keys = (
        "L", "K", "coupling_channels", "butterfly_levels", "segments", "bidirectional",
        "block_size", "init", "tied", "freeze_butterfly", "seed",
    )
    return {k: d[k] for k in keys}


def train_config(cfg: RunConfig) -> dict:
    d = cfg.to_dict()
    keys = (
        "lr", "warmup_iters", "lr_decay", "butterfly_lr_gamma", "batch_size", "max_iters",
        "ema", "ema_decay", "grad_clip", "eval_every", "freeze_butterfly", "seed", "n_bits",
    )
    return {k: d[k] for k in keys}
