"""Prototype-similarity detector, threshold calibration and detection-rate metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .prototypes import Prototypes
from .tensor import ContractError, Tensor, no_grad

MIN_CALIBRATION = 100


@dataclass
class DetectionResult:
    scores: np.ndarray
    theta: float

    @property
    def clean(self) -> np.ndarray:
        return self.scores >= self.theta

    @property
    def verdicts(self) -> list[str]:
        return ["clean" if c else "attacked" for c in self.clean]


def _centroids(prototypes) -> np.ndarray:
    c = prototypes.centroids if isinstance(prototypes, Prototypes) else np.asarray(prototypes, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] == 0:
        raise ContractError("detection needs at least one prototype")
    return c / np.linalg.norm(c, axis=1, keepdims=True)


def similarity_scores(embeddings, prototypes) -> np.ndarray:
    """Max cosine similarity of each embedding to any prototype, clipped to [-1, 1]."""
    v = np.asarray(embeddings.data if isinstance(embeddings, Tensor) else embeddings, dtype=np.float64)
    v = v / np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)
    return np.clip((v @ _centroids(prototypes).T).max(axis=1), -1.0, 1.0)


def embed(encoder, images: np.ndarray, chunk: int = 128) -> np.ndarray:
    """Eval-mode embeddings of ``images`` in chunks."""
    out = []
    with no_grad():
        for start in range(0, len(images), chunk):
            out.append(encoder.forward(images[start:start + chunk], training=False).data.astype(np.float64))
    return np.concatenate(out) if out else np.zeros((0, 0))


def detect(images: np.ndarray, encoder, prototypes, theta: float) -> DetectionResult:
    return DetectionResult(similarity_scores(embed(encoder, images), prototypes), float(theta))


def calibrate_threshold(scores, q: float) -> float:
    """Threshold passing a fraction ``q`` of the clean validation scores.

    With ``n`` sorted scores the threshold is the ``ceil((1-q) n)``-th
    smallest (at least the first), so e.g. ``q=0.95`` on 100 scores picks the
    5th smallest.
    """
    s = np.sort(np.asarray(scores, dtype=np.float64))
    if len(s) < MIN_CALIBRATION:
        raise ContractError(f"calibration needs at least {MIN_CALIBRATION} scores, got {len(s)}")
    if not 0.0 < q <= 1.0:
        raise ContractError(f"clean-pass rate must lie in (0, 1], got {q}")
    k = max(int(math.ceil(round((1.0 - q) * len(s), 9))), 1)
    return float(s[k - 1])


def detection_rate(clean: DetectionResult, attacked: DetectionResult) -> tuple[float, float]:
    """(fraction of clean passed, fraction of attacked flagged)."""
    if len(clean.scores) == 0 or len(attacked.scores) == 0:
        raise ContractError("detection rates need non-empty clean and attacked sets")
    return float(clean.clean.mean()), float((~attacked.clean).mean())


def auc(clean_scores, attacked_scores) -> float:
    """Probability that a clean score exceeds an attacked one (ties count half)."""
    c = np.asarray(clean_scores, dtype=np.float64)
    a = np.asarray(attacked_scores, dtype=np.float64)
    if len(c) == 0 or len(a) == 0:
        raise ContractError("AUC needs non-empty score sets")
    allv = np.concatenate([c, a])
    order = np.argsort(allv, kind="mergesort")
    ranks = np.empty(len(allv))
    sorted_v = allv[order]
    i = 0
    while i < len(allv):
        j = i
        while j + 1 < len(allv) and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[: len(c)].sum() - len(c) * (len(c) + 1) / 2.0
    return float(u / (len(c) * len(a)))
