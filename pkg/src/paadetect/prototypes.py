"""Density-peak prototypes, nearest-prototype assignment and the discrimination bank."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .losses import GAMMA_MIN, concentration
from .tensor import ContractError, Tensor

BANK_CAPACITY = 10


def _unit(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(n, 1e-12)


@dataclass
class Prototypes:
    """``M`` unit centroids with concentrations and member counts."""

    centroids: np.ndarray  # M x D
    gammas: np.ndarray  # M
    counts: np.ndarray  # M
    peaks: np.ndarray | None = None  # index of each density peak in the source set

    def __post_init__(self):
        self.centroids = _unit(self.centroids)
        self.gammas = np.maximum(np.asarray(self.gammas, dtype=np.float64), GAMMA_MIN)
        self.counts = np.asarray(self.counts, dtype=np.int64)

    def __len__(self) -> int:
        return self.centroids.shape[0]


def pairwise_distances(x: np.ndarray) -> np.ndarray:
    sq = np.sum(x * x, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(np.maximum(d2, 0.0))


def density_radius(dist: np.ndarray, fraction: float = 0.02) -> float:
    """Radius at which points have ``fraction`` of the set as neighbours on average."""
    n = dist.shape[0]
    if n < 2:
        return 0.0
    off = dist[np.triu_indices(n, k=1)]
    return float(np.quantile(off, fraction))


def density_scores(dist: np.ndarray, d_c: float) -> tuple[np.ndarray, np.ndarray]:
    """Local density ``rho`` (self included) and separation ``delta`` per point.

    A point ``j`` is denser than ``i`` when ``rho_j > rho_i``, or when the
    densities tie and ``j < i``; the single point with nobody denser gets the
    largest distance in the set.
    """
    n = dist.shape[0]
    rho = (dist < d_c).sum(axis=1)
    idx = np.arange(n)
    denser = (rho[None, :] > rho[:, None]) | ((rho[None, :] == rho[:, None]) & (idx[None, :] < idx[:, None]))
    masked = np.where(denser, dist, np.inf)
    delta = masked.min(axis=1)
    top = ~denser.any(axis=1)
    delta[top] = dist.max() if n > 1 else 0.0
    return rho, delta


def top_peaks(score: np.ndarray, m: int) -> np.ndarray:
    """Indices of the ``m`` largest scores, ties to the lower index, returned ascending."""
    order = np.lexsort((np.arange(len(score)), -score))
    return np.sort(order[:m])


def assign(v, centroids) -> np.ndarray:
    """Nearest centroid by cosine similarity; ties go to the lowest id."""
    c = centroids.centroids if isinstance(centroids, Prototypes) else centroids
    v = _unit(v)
    single = v.ndim == 1
    sims = np.atleast_2d(v) @ _unit(c).T
    ids = np.argmax(sims, axis=1)
    return ids[0] if single else ids


def cluster_stats(emb: np.ndarray, labels: np.ndarray, seeds: np.ndarray, beta: float) -> Prototypes:
    """Centroids as normalized member means (``seeds`` for empty clusters) and their concentrations."""
    m = seeds.shape[0]
    cents = np.empty_like(seeds)
    gammas = np.empty(m)
    counts = np.bincount(labels, minlength=m)
    for k in range(m):
        members = emb[labels == k]
        if len(members) == 0:
            cents[k] = seeds[k]
            gammas[k] = GAMMA_MIN
            continue
        mean = members.mean(axis=0)
        norm = np.linalg.norm(mean)
        cents[k] = mean / norm if norm > 1e-12 else seeds[k]
        gammas[k] = concentration(members, cents[k], beta)
    return Prototypes(cents, gammas, counts)


def density_peaks(embeddings, m: int, d_c: float | None = None, beta: float = 10.0,
                  fraction: float = 0.02) -> tuple[Prototypes, np.ndarray]:
    """Prototypes at the ``m`` strongest density peaks and the assignment of every point.

    ``d_c`` defaults to the distance quantile giving ``fraction`` neighbours
    per point.  Prototypes are ordered by the position of their peak.
    """
    emb = _unit(embeddings)
    n = emb.shape[0]
    if m < 1 or m > n:
        raise ContractError(f"need 1 <= M <= n, got M={m}, n={n}")
    dist = pairwise_distances(emb)
    if d_c is None:
        d_c = density_radius(dist, fraction)
    rho, delta = density_scores(dist, d_c)
    peaks = top_peaks(rho * delta, m)
    labels = assign(emb, emb[peaks])
    protos = cluster_stats(emb, labels, emb[peaks], beta)
    protos.peaks = peaks
    return protos, labels


class DiscriminationBank:
    """One bounded FIFO of pooled, normalized momentum features per prototype."""

    def __init__(self, num_prototypes: int, dim: int = 128, capacity: int = BANK_CAPACITY):
        if capacity < 1:
            raise ContractError("bank capacity must be >= 1")
        self.dim = dim
        self.capacity = capacity
        self.queues: list[deque] = [deque(maxlen=capacity) for _ in range(num_prototypes)]

    def __len__(self) -> int:
        return len(self.queues)

    def reset(self, num_prototypes: int | None = None) -> None:
        n = len(self.queues) if num_prototypes is None else num_prototypes
        self.queues = [deque(maxlen=self.capacity) for _ in range(n)]

    def update(self, z, assignments, batch_id: int) -> list[int]:
        """Enqueue the normalized mean of each prototype's members in this batch.

        Returns the prototypes that received an entry.
        """
        z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
        assignments = np.asarray(assignments, dtype=np.int64)
        touched = []
        for m in np.unique(assignments):
            pooled = z[assignments == m].mean(axis=0)
            self.queues[m].append((int(batch_id), _unit(pooled)))
            touched.append(int(m))
        return touched

    def entries(self, m: int) -> np.ndarray:
        q = self.queues[m]
        if not q:
            return np.zeros((0, self.dim))
        return np.stack([e for _, e in q])

    def tags(self, m: int) -> list[int]:
        return [t for t, _ in self.queues[m]]

    def contrastive_set(self, m: int) -> np.ndarray:
        """Contents of bank ``m`` (empty when nothing was enqueued yet)."""
        return self.entries(m)

    def occupancy(self) -> np.ndarray:
        return np.array([len(q) for q in self.queues], dtype=np.int64)

    def concentrations(self, centroids: np.ndarray, beta: float) -> np.ndarray:
        """Per-bank concentration of the queued entries around each centroid (floored)."""
        phi = np.full(len(self.queues), GAMMA_MIN)
        for m, q in enumerate(self.queues):
            if q:
                phi[m] = max(concentration(self.entries(m), centroids[m], beta), GAMMA_MIN)
        return phi

    def snapshot(self) -> "DiscriminationBank":
        other = DiscriminationBank(len(self.queues), self.dim, self.capacity)
        for q, src in zip(other.queues, self.queues):
            q.extend((t, e.copy()) for t, e in src)
        return other

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for m, q in enumerate(self.queues):
            out[f"banktag.{m}"] = np.array([t for t, _ in q], dtype=np.int64)
            for slot, (_, e) in enumerate(q):
                out[f"bank.{m}.{slot}"] = e.astype(np.float32)
        return out

    @classmethod
    def from_state(cls, arrays: dict[str, np.ndarray], num_prototypes: int, dim: int = 128,
                   capacity: int = BANK_CAPACITY) -> "DiscriminationBank":
        bank = cls(num_prototypes, dim, capacity)
        for m in range(num_prototypes):
            tags = arrays.get(f"banktag.{m}", np.zeros(0, np.int64))
            for slot, t in enumerate(tags):
                bank.queues[m].append((int(t), np.asarray(arrays[f"bank.{m}.{slot}"], dtype=np.float64)))
        return bank


def icl_sets(z_self: np.ndarray, assignments: np.ndarray, bank: DiscriminationBank) -> list[np.ndarray]:
    """Per-anchor contrastive sets: the anchor's own momentum feature followed by its bank.

    Anchors whose bank is still empty get an empty set and are skipped by the loss.
    """
    out = []
    for i, m in enumerate(assignments):
        members = bank.contrastive_set(int(m))
        out.append(np.concatenate([z_self[i:i + 1], members], axis=0) if len(members) else members)
    return out
