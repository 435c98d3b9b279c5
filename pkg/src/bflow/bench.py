"""Wall-clock micro-benchmarks of the O(D) primitives.

Every timing is the median (and inter-quartile range) of ``reps`` runs after
three warm-up runs. The work is kept on one thread with ``threadpoolctl`` so
that BLAS-backed operations do not fan out.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .blockwise import blockwise_matvec, blockwise_new
from .butterfly import (
    factor_invert,
    factor_log_det,
    factor_matvec,
    factor_new,
    layer_apply,
    layer_invert_apply,
    layer_new,
)

OPS = ("matvec", "inverse", "logdet", "blockwise_matvec", "forward", "inversion")
WARMUP = 3


@dataclass
class BenchRow:
    op: str
    dim: int
    batch: int
    median_ns: float
    iqr_ns: float
    block_size: int = 1

    def csv_row(self) -> str:
        return f"{self.op},{self.dim},{self.batch},{self.median_ns:.0f},{self.iqr_ns:.0f}"


def time_callable(fn, reps: int) -> tuple[float, float]:
    for _ in range(WARMUP):
        fn()
    samples = np.empty(reps)
    for i in range(reps):
        t0 = time.perf_counter_ns()
        fn()
        samples[i] = time.perf_counter_ns() - t0
    q1, med, q3 = np.percentile(samples, [25, 50, 75])
    return float(med), float(q3 - q1)


def _workload(op: str, dim: int, batch: int, block_size: int, rng):
    """Zero-argument closure performing one instance of ``op``."""
    x = rng.standard_normal((batch, dim))
    if op in ("matvec", "inverse", "logdet"):
        f = factor_new(1, dim, "rotation", rng)
        if op == "matvec":
            return lambda: factor_matvec(f, x)
        if op == "inverse":
            return lambda: factor_matvec(factor_invert(f), x)
        return lambda: factor_log_det(f)
    if op == "blockwise_matvec":
        f = blockwise_new(1, dim, block_size, "rotation", rng)
        return lambda: blockwise_matvec(f, x)
    # Whole-layer passes over all levels: "forward" is apply plus log-det,
    # "inversion" is the inverse application alone.
    layer = layer_new(dim, int(dim).bit_length() - 1, "rotation", rng)
    if op == "forward":
        return lambda: layer_apply(layer, x)
    if op == "inversion":
        return lambda: layer_invert_apply(layer, x)
    raise ValueError(f"unknown op {op!r}")


def run_bench(ops, dims, batches, reps: int = 20, block_sizes=(1,), seed: int = 0) -> list[BenchRow]:
    rows = []
    rng = np.random.default_rng(seed)
    with threadpool_limits(limits=1):
        for op in ops:
            if op not in OPS:
                raise ValueError(f"unknown op {op!r}")
            sizes = block_sizes if op == "blockwise_matvec" else (1,)
            for c in sizes:
                for d in dims:
                    for b in batches:
                        med, iqr = time_callable(_workload(op, int(d), int(b), int(c), rng), reps)
                        rows.append(BenchRow(op if c == 1 else f"{op}_c{c}", int(d), int(b), med, iqr, int(c)))
    return rows


def loglog_slope(dims, times) -> float:
    """Least-squares slope of log(time) against log(dim)."""
    return float(np.polyfit(np.log(np.asarray(dims, float)), np.log(np.asarray(times, float)), 1)[0])

