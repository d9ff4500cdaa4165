"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .core import Tensor, backward, no_grad

__all__ = ["finite_diff_check", "numerical_grad"]


def numerical_grad(f: Callable[[Tensor], Tensor], x: np.ndarray, h: float,
                   coords: np.ndarray) -> np.ndarray:
    """Central differences of ``f`` at the flat ``coords`` of ``x`` (evaluated in float64)."""
    base = np.array(x, dtype=np.float64)
    flat = base.reshape(-1)
    out = np.empty(len(coords), dtype=np.float64)
    with no_grad():
        for n, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(Tensor(base, dtype=np.float64)).data)
            flat[i] = orig - h
            fm = float(f(Tensor(base, dtype=np.float64)).data)
            flat[i] = orig
            out[n] = (fp - fm) / (2.0 * h)
    return out


def finite_diff_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5,
                      max_elems: int | None = None, seed: int = 0,
                      floor: float = 1e-6) -> float:
    """Largest elementwise relative error between backward() and central differences.

    The analytic gradient is taken in ``x``'s own precision; the numeric one
    always runs in float64, so a float32 ``x`` measures how far the 32-bit
    gradient is from the true one.  Per element the error is
    ``|a - n| / max(|a|, |n|, floor)``.  ``max_elems`` limits the check to a
    seeded random subset of coordinates.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    if x.dtype.kind != "f":
        x = x.astype(np.float64)
    leaf = Tensor(x.copy(), requires_grad=True, dtype=x.dtype)
    loss = f(leaf)
    backward(loss, [leaf])
    analytic = leaf.grad.reshape(-1).astype(np.float64)

    coords = np.arange(x.size)
    if max_elems is not None and x.size > max_elems:
        coords = np.sort(np.random.default_rng(seed).choice(x.size, max_elems, replace=False))
    numeric = numerical_grad(f, x, h, coords)
    a = analytic[coords]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
    return float(np.max(np.abs(a - numeric) / denom))
