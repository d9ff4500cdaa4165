"""Contrastive objectives: InfoNCE, pixel mapping, prototype-wise and instance-wise losses."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import (
    ConfigurationError,
    ContractError,
    Tensor,
    as_tensor,
    concat,
    getitem,
    l2_normalize,
    log_softmax,
    matmul,
    mean,
    reshape,
    sum as tsum,
    transpose,
    where,
)

GAMMA_MIN = 1e-3


@dataclass
class LossConfig:
    tau: float = 0.1
    beta: float = 10.0
    r: int = 16000
    lambda1: float = 1.0
    lambda2: float = 1.0
    gamma_min: float = GAMMA_MIN
    pce_positive_in_denominator: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigurationError(f"tau must be positive, got {self.tau}")
        if not self.beta > 0:
            raise ConfigurationError(f"beta must be positive, got {self.beta}")
        if self.r < 1:
            raise ConfigurationError(f"r must be >= 1, got {self.r}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if not self.gamma_min > 0:
            raise ConfigurationError("gamma_min must be positive")


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ConfigurationError(f"temperature must be positive, got {tau}")


def _positive_nll(logits: Tensor) -> Tensor:
    """Mean of -log softmax(row)[0]."""
    return -mean(getitem(log_softmax(logits, axis=-1), (slice(None), 0)))


def infonce_loss(v, v_pos, negatives, tau: float) -> Tensor:
    """InfoNCE with the positive at logit 0 and ``r`` negatives per anchor.

    ``negatives`` is either shared (r x D) or per anchor (n x r x D).
    """
    _check_tau(tau)
    v, v_pos, negatives = as_tensor(v), as_tensor(v_pos), as_tensor(negatives)
    pos = reshape(tsum(v * v_pos, axis=-1), (v.shape[0], 1))
    if negatives.ndim == 2:
        neg = matmul(v, transpose(negatives))
    else:
        neg = reshape(matmul(reshape(v, (v.shape[0], 1, v.shape[1])), transpose(negatives, (0, 2, 1))),
                      (v.shape[0], negatives.shape[1]))
    return _positive_nll(concat([pos, neg], axis=1) * (1.0 / tau))


def pm_loss(v_t, v_s, tau: float, reduction: str = "mean") -> Tensor:
    """Pixel-mapping loss between two row-aligned views of the same batch.

    Anchor ``i`` is ``v_s[i]``; its positive is ``v_t[i]`` and the denominator
    runs over ``v_t[b]`` for every ``b`` in the batch (``b = i`` included).
    """
    _check_tau(tau)
    v_t, v_s = as_tensor(v_t), as_tensor(v_s)
    if v_t.shape != v_s.shape:
        raise ContractError(f"views are not row-aligned: {v_t.shape} vs {v_s.shape}")
    b = v_t.shape[0]
    if b < 2:
        warnings.warn("pm_loss on a batch of one is identically zero", RuntimeWarning, stacklevel=2)
    logits = matmul(v_s, transpose(v_t)) * (1.0 / tau)
    idx = np.arange(b)
    per_anchor = -getitem(log_softmax(logits, axis=1), (idx, idx))
    if reduction == "none":
        return per_anchor
    return mean(per_anchor)


def concentration(members, prototype, beta: float) -> float:
    """Spread of ``members`` around ``prototype``: sum of distances / (n log(n + beta))."""
    members = np.asarray(members.data if isinstance(members, Tensor) else members, dtype=np.float64)
    prototype = np.asarray(prototype.data if isinstance(prototype, Tensor) else prototype, dtype=np.float64)
    if members.ndim != 2 or members.shape[0] == 0:
        raise ContractError("concentration needs at least one member")
    n = members.shape[0]
    dist = np.sqrt(np.sum((members - prototype[None, :]) ** 2, axis=1))
    return float(dist.sum() / (n * math.log(n + beta)))


def sample_negatives(assignments: np.ndarray, num_prototypes: int, r: int,
                     rng: np.random.Generator | None = None) -> np.ndarray:
    """Negative prototype ids per anchor: all others when ``r >= M - 1``, else a random subset."""
    assignments = np.asarray(assignments, dtype=np.int64)
    k = min(int(r), num_prototypes - 1)
    if k < 1:
        raise ContractError("prototype-wise loss needs at least one negative prototype")
    others = np.array([[m for m in range(num_prototypes) if m != a] for a in assignments], dtype=np.int64)
    if k == num_prototypes - 1:
        return others
    rng = rng or np.random.default_rng(0)
    cols = np.stack([rng.permutation(num_prototypes - 1)[:k] for _ in assignments])
    return np.take_along_axis(others, cols, axis=1)


def pce_loss(v, assignments, prototypes, gammas, negatives=None,
             positive_in_denominator: bool = True, gamma_min: float = GAMMA_MIN) -> Tensor:
    """Prototype-wise contrastive estimation.

    Each anchor's logits are ``v . p_m / gamma_m`` for its assigned prototype and
    its negative prototypes ``negatives`` (n x k ids; default: all others).
    Concentrations below ``gamma_min`` are floored.
    """
    v = as_tensor(v)
    protos = np.asarray(prototypes.data if isinstance(prototypes, Tensor) else prototypes)
    gam = np.maximum(np.asarray(gammas, dtype=np.float64), gamma_min)
    assignments = np.asarray(assignments, dtype=np.int64)
    m = protos.shape[0]
    if negatives is None:
        negatives = sample_negatives(assignments, m, m)
    negatives = np.asarray(negatives, dtype=np.int64)
    if negatives.ndim != 2 or negatives.shape[1] == 0:
        raise ContractError("every anchor needs a non-empty negative prototype set")
    ids = np.concatenate([assignments[:, None], negatives], axis=1)  # n x (1+k)
    all_logits = matmul(v, Tensor(protos.T, dtype=v.dtype)) * Tensor((1.0 / gam)[None, :], dtype=v.dtype)
    rows = np.arange(v.shape[0])[:, None]
    logits = getitem(all_logits, (rows, ids))
    if positive_in_denominator:
        return _positive_nll(logits)
    pos = getitem(logits, (slice(None), 0))
    neg = getitem(logits, (slice(None), slice(1, None)))
    return -mean(pos - _logsumexp_rows(neg))


def _logsumexp_rows(x: Tensor) -> Tensor:
    # log sum exp = x_j - log_softmax_j for any j; use column 0
    return getitem(x, (slice(None), 0)) - getitem(log_softmax(x, axis=-1), (slice(None), 0))


def icl_logits(v, sets: Sequence[np.ndarray], centroids, phi) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Padded ``cos(v_i, z) * cos(v_i, p_i) / phi_i`` for every ``z`` in each anchor's set."""
    v = as_tensor(v)
    n, d = v.shape
    valid = np.array([s is not None and len(s) > 0 for s in sets], dtype=bool)
    kmax = max((len(s) for s, ok in zip(sets, valid) if ok), default=1)
    padded = np.zeros((n, kmax, d), dtype=v.dtype)
    mask = np.zeros((n, kmax), dtype=bool)
    for i, s in enumerate(sets):
        if valid[i]:
            z = np.asarray(s, dtype=np.float64)
            z = z / np.linalg.norm(z, axis=1, keepdims=True)
            padded[i, : len(z)] = z
            mask[i, : len(z)] = True
    cents = np.asarray(centroids, dtype=np.float64)
    cents = cents / np.linalg.norm(cents, axis=1, keepdims=True)
    vn = l2_normalize(v)
    cos_z = reshape(matmul(reshape(vn, (n, 1, d)), Tensor(padded.transpose(0, 2, 1), dtype=v.dtype)), (n, kmax))
    cos_p = tsum(vn * Tensor(cents, dtype=v.dtype), axis=-1)
    phi = np.asarray(phi, dtype=np.float64)
    scale = reshape(cos_p, (n, 1)) * Tensor((1.0 / phi)[:, None], dtype=v.dtype)
    return cos_z * scale, mask, valid


def icl_loss(v, sets: Sequence[np.ndarray], centroids, phi, gamma_min: float = GAMMA_MIN,
             return_skipped: bool = False):
    """Instance-wise contrastive loss over discrimination-bank contents.

    ``sets[i]`` holds the representations anchor ``i`` is contrasted with; row
    0 is the anchor's own stored representation (the positive), the others
    come from the bank of its prototype.  ``centroids[i]`` is that prototype
    and ``phi[i]`` its bank concentration.  Anchors with an empty set are
    skipped; the loss over zero anchors is 0.
    """
    v = as_tensor(v)
    phi = np.maximum(np.asarray(phi, dtype=np.float64), gamma_min)
    logits, mask, valid = icl_logits(v, sets, centroids, phi)
    skipped = int((~valid).sum())
    if not valid.any():
        zero = tsum(v * 0.0)
        return (zero, skipped) if return_skipped else zero
    masked = where(mask, logits, np.asarray(-1e30, dtype=v.dtype))
    nll = -getitem(log_softmax(masked, axis=-1), (np.flatnonzero(valid), 0))
    loss = mean(nll)
    return (loss, skipped) if return_skipped else loss


def total_loss(pm, pce, icl, lambda1: float = 1.0, lambda2: float = 1.0):
    return pm + lambda1 * pce + lambda2 * icl
