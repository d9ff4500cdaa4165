"""Finite-difference checks of every loss and the PAA block in 64-bit mode."""

from __future__ import annotations

import numpy as np

from .encoder import PAABlockConfig, block_param_specs, bn_prefixes, init_param, paa_block
from .losses import icl_loss, infonce_loss, pce_loss, pm_loss, total_loss
from .tensor import BatchNormState, Tensor, finite_diff_check, l2_normalize, precision
from .tensor import sum as tsum

TOLERANCE = 1e-4


def _unit(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def loss_checks(rng: np.random.Generator) -> list[tuple[str, callable, np.ndarray]]:
    """(name, f, x) triples; ``f`` maps raw anchors to a scalar loss through L2 normalisation."""
    n, d, m = 4, 8, 5
    v = rng.standard_normal((n, d))
    pos = Tensor(_unit(rng, n, d))
    negs = Tensor(_unit(rng, 6, d))
    protos = _unit(rng, m, d)
    gam = rng.uniform(0.2, 1.0, m)
    labels = rng.integers(0, m, n)
    sets = [_unit(rng, int(k), d) for k in rng.integers(1, 5, n)]
    phi = rng.uniform(0.3, 1.0, n)
    tau = float(rng.uniform(0.1, 1.0))

    def total(x):
        u = l2_normalize(x)
        return total_loss(pm_loss(u, pos, tau), pce_loss(u, labels, protos, gam),
                          icl_loss(u, sets, protos[labels], phi), 0.7, 1.3)

    return [
        ("infonce", lambda x: infonce_loss(l2_normalize(x), pos, negs, tau), v),
        ("pm", lambda x: pm_loss(l2_normalize(x), pos, tau), v),
        ("pce", lambda x: pce_loss(l2_normalize(x), labels, protos, gam), v),
        ("icl", lambda x: icl_loss(x, sets, protos[labels], phi), v),
        ("total", total, v),
    ]


def paa_check(rng: np.random.Generator, training: bool = True):
    size, stride = [(3, 1), (4, 1), (4, 2)][int(rng.integers(3))]
    cfg = PAABlockConfig(in_channels=8, bottleneck_channels=4, out_channels=16, stride=stride,
                         height=size, width=size, heads=2)
    specs = block_param_specs("b", cfg)
    params = {k: Tensor(init_param(s, rng, np.float64), dtype=np.float64) for k, s in specs.items()}
    for k in params:
        if k.endswith(".gamma") or k.endswith(".beta"):
            params[k] = Tensor(params[k].data + 0.1 * rng.standard_normal(params[k].shape), dtype=np.float64)
    buffers = {p: BatchNormState(specs[f"{p}.gamma"].shape[0], dtype=np.float64) for p in bn_prefixes(specs)}
    x = rng.standard_normal((2, 8, size, size))
    out_shape = (2, 16, size // stride, size // stride)
    weight = Tensor(rng.standard_normal(out_shape), dtype=np.float64)

    def f(inp):
        return tsum(paa_block(inp, cfg, params, buffers, "b", training, parallel=False) * weight)

    return f"paa(size={size},stride={stride})", f, x


def run_gradchecks(module: str = "all", seed: int = 0, configs: int = 5) -> list[dict]:
    rows = []
    with precision("float64"):
        for c in range(configs):
            rng = np.random.default_rng(seed * 1000 + c)
            if module in ("all", "losses"):
                for name, f, x in loss_checks(rng):
                    err = finite_diff_check(f, x)
                    rows.append({"check": name, "config": c, "error": err, "pass": err < TOLERANCE})
            if module in ("all", "paa"):
                name, f, x = paa_check(rng)
                err = finite_diff_check(f, x)
                rows.append({"check": name, "config": c, "error": err, "pass": err < TOLERANCE})
    return rows
