"""Sequential vs concurrent timing of the two axial-attention branches of a PAA block."""

from __future__ import annotations

import os
import time
from typing import Sequence

import numpy as np

from .encoder import (
    PAABlockConfig,
    block_param_specs,
    bn_prefixes,
    init_param,
    paa_block,
    set_branch_workers,
    branch_workers,
)
from .tensor import BatchNormState, Tensor, no_grad


def make_block(size: int, channels: int = 32, heads: int = 8, seed: int = 0):
    cfg = PAABlockConfig(in_channels=4 * channels, bottleneck_channels=channels, out_channels=4 * channels,
                         stride=1, height=size, width=size, heads=heads)
    specs = block_param_specs("b", cfg)
    rng = np.random.default_rng(seed)
    params = {n: Tensor(init_param(s, rng, np.float32)) for n, s in specs.items()}
    buffers = {p: BatchNormState(specs[f"{p}.gamma"].shape[0]) for p in bn_prefixes(specs)}
    return cfg, params, buffers


def _time(fn, repeats: int) -> tuple[float, np.ndarray]:
    best = np.inf
    out = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def bench_paa(sizes: Sequence[int] = (16, 32, 64), workers: Sequence[int] = (1, 2, 4), batch: int = 2,
              channels: int = 32, repeats: int = 3, seed: int = 0) -> list[dict]:
    """One row per (size, workers): best-of-``repeats`` times and a bit-identity check."""
    rows = []
    previous = branch_workers()
    try:
        for size in sizes:
            cfg, params, buffers = make_block(size, channels, seed=seed)
            x = Tensor(np.random.default_rng(seed + size).standard_normal(
                (batch, cfg.in_channels, size, size)).astype(np.float32))
            with no_grad():
                seq_t, seq_out = _time(lambda: paa_block(x, cfg, params, buffers, "b", False, parallel=False).data,
                                       repeats)
                for w in workers:
                    set_branch_workers(w)
                    par_t, par_out = _time(
                        lambda: paa_block(x, cfg, params, buffers, "b", False, parallel=w > 1).data, repeats)
                    rows.append({
                        "size": size,
                        "workers": w,
                        "sequential_s": seq_t,
                        "parallel_s": par_t,
                        "ratio": par_t / seq_t,
                        "identical": bool(np.array_equal(seq_out, par_out)),
                        "cpus": os.cpu_count(),
                    })
    finally:
        set_branch_workers(previous)
    return rows
