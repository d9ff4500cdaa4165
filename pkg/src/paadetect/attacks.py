"""Gradient-based attacks against an embedding probe, and the probe itself."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np

from .tensor import (
    ConfigurationError,
    ContractError,
    Tensor,
    backward,
    cross_entropy,
    matmul,
    max as tmax,
    no_grad,
    sum as tsum,
    tanh,
    where,
)

Model = Callable[[Tensor], Tensor]  # images -> class logits

ALGORITHMS = ("FGSM", "PGD", "BIM", "DeepFool", "CW", "JSMA")

ATTACK_DEFAULTS = {
    "FGSM": {"eps": 0.008},
    "PGD": {"eps": 0.01, "alpha": 0.02, "steps": 40},
    "BIM": {"eps": 0.03, "alpha": 0.01, "steps": 10},
    "DeepFool": {"steps": 20, "overshoot": 0.02},
    "CW": {"c": 1.0, "kappa": 2.0, "steps": 500, "lr": 0.01},
    "JSMA": {"gamma": 0.02},
}


@dataclass(frozen=True)
class AttackSpec:
    algorithm: str
    eps: float = 0.0
    alpha: float = 0.0
    steps: int = 1
    kappa: float = 0.0
    c: float = 1.0
    lr: float = 0.01
    gamma: float = 0.02
    overshoot: float = 0.02
    random_start: bool = False

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"unknown attack {self.algorithm!r}; expected one of {ALGORITHMS}")
        if self.eps < 0 or self.alpha < 0:
            raise ConfigurationError("eps and alpha must be non-negative")
        if self.steps < 1:
            raise ConfigurationError("steps must be >= 1")
        if not 0 < self.gamma <= 1:
            raise ConfigurationError("JSMA gamma must lie in (0, 1]")

    @classmethod
    def default(cls, algorithm: str, **overrides) -> "AttackSpec":
        if algorithm not in ATTACK_DEFAULTS:
            raise ConfigurationError(f"unknown attack {algorithm!r}; expected one of {ALGORITHMS}")
        return cls(algorithm, **{**ATTACK_DEFAULTS[algorithm], **overrides})

    @property
    def label(self) -> str:
        keys = ["eps", "alpha", "steps"] if self.algorithm in ("FGSM", "PGD", "BIM") else []
        keys = {"FGSM": ["eps"], "DeepFool": ["steps"], "CW": ["c", "kappa", "steps", "lr"],
                "JSMA": ["gamma"]}.get(self.algorithm, keys)
        return self.algorithm + "(" + ",".join(f"{k}={getattr(self, k):g}" for k in keys) + ")"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AttackResult:
    x_adv: np.ndarray
    success: np.ndarray  # per image
    iterations: np.ndarray  # per image
    extra: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# target models
# ---------------------------------------------------------------------------


class LinearModel:
    """Affine classifier on flattened images; closed forms make it a handy oracle."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        self.weight = np.asarray(weight, dtype=np.float64)  # D x K
        self.bias = np.asarray(bias, dtype=np.float64)

    def __call__(self, x: Tensor) -> Tensor:
        flat = x.reshape((x.shape[0], -1))
        return matmul(flat, Tensor(self.weight, dtype=x.dtype)) + Tensor(self.bias, dtype=x.dtype)


class ProbeHead:
    """Softmax regression from embeddings to class logits."""

    def __init__(self, dim: int, classes: int):
        self.weight = np.zeros((classes, dim))
        self.bias = np.zeros(classes)

    @property
    def classes(self) -> int:
        return self.weight.shape[0]

    def logits(self, v: Tensor) -> Tensor:
        return matmul(v, Tensor(self.weight.T, dtype=v.dtype)) + Tensor(self.bias, dtype=v.dtype)

    def fit(self, emb: np.ndarray, labels: np.ndarray, epochs: int = 500, lr: float = 0.5,
            l2: float = 1e-4) -> "ProbeHead":
        """Full-batch gradient descent on the cross-entropy; deterministic."""
        emb = np.asarray(emb, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        onehot = np.eye(self.classes)[labels]
        n = len(emb)
        for _ in range(epochs):
            z = emb @ self.weight.T + self.bias
            z -= z.max(axis=1, keepdims=True)
            p = np.exp(z)
            p /= p.sum(axis=1, keepdims=True)
            g = (p - onehot) / n
            self.weight -= lr * (g.T @ emb + l2 * self.weight)
            self.bias -= lr * g.sum(axis=0)
        return self

    def predict(self, emb: np.ndarray) -> np.ndarray:
        return np.argmax(np.asarray(emb) @ self.weight.T + self.bias, axis=1)

    def state(self) -> dict[str, np.ndarray]:
        return {"probe.weight": self.weight, "probe.bias": self.bias}


class EncoderClassifier:
    """``probe(encoder(x))`` with the encoder frozen and in eval mode."""

    def __init__(self, encoder, probe: ProbeHead):
        self.encoder = encoder.frozen()
        self.probe = probe

    def __call__(self, x: Tensor) -> Tensor:
        return self.probe.logits(self.encoder.forward(x, training=False))


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def _leaf(x: np.ndarray) -> Tensor:
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True, dtype=np.float64)


def input_grad(model: Model, x: np.ndarray, objective: Callable[[Tensor], Tensor]) -> tuple[np.ndarray, np.ndarray]:
    """Logits at ``x`` and the gradient of ``objective(logits)`` with respect to ``x``."""
    leaf = _leaf(x)
    logits = model(leaf)
    backward(objective(logits), [leaf])
    return logits.data.astype(np.float64), leaf.grad


def logits_of(model: Model, x: np.ndarray) -> np.ndarray:
    with no_grad():
        return model(Tensor(np.asarray(x, dtype=np.float64), dtype=np.float64)).data.astype(np.float64)


def _ce_sum(labels: np.ndarray) -> Callable[[Tensor], Tensor]:
    return lambda z: cross_entropy(z, labels, reduction="sum")


def _column_sum(k: np.ndarray) -> Callable[[Tensor], Tensor]:
    """Sum over images of logit ``k[i]``."""
    def f(z: Tensor) -> Tensor:
        mask = np.zeros(z.shape, dtype=bool)
        mask[np.arange(z.shape[0]), k] = True
        return tsum(where(mask, z, 0.0))
    return f


# ---------------------------------------------------------------------------
# L-infinity attacks
# ---------------------------------------------------------------------------


def project_linf(x: np.ndarray, delta: np.ndarray, eps: float) -> np.ndarray:
    """``x + delta`` clipped to the ``eps`` ball and to [0, 1].

    Rounding in ``x + delta`` can overshoot the ball by an ulp; such values
    are stepped back towards ``x`` so that ``|x_adv - x| <= eps`` holds exactly.
    """
    x_adv = np.clip(x + np.clip(delta, -eps, eps), 0.0, 1.0)
    over = np.abs(x_adv - x) > eps
    while over.any():
        x_adv[over] = np.nextafter(x_adv[over], x[over])
        over = np.abs(x_adv - x) > eps
    return x_adv


def fgsm(model: Model, x: np.ndarray, labels: np.ndarray, eps: float) -> np.ndarray:
    """One signed gradient step of size ``eps`` on the cross-entropy, clipped to [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    _, g = input_grad(model, x, _ce_sum(np.asarray(labels)))
    return project_linf(x, eps * np.sign(g), eps)


def pgd(model: Model, x: np.ndarray, labels: np.ndarray, eps: float, alpha: float, steps: int,
        random_start: bool = False, seed: int = 0, trace: list | None = None) -> np.ndarray:
    """Projected signed-gradient ascent inside the ``eps`` ball around ``x``.

    The perturbation is carried explicitly, so with one step and ``alpha >= eps``
    the output is bit-identical to :func:`fgsm`.  ``trace`` collects iterates.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    delta = np.zeros_like(x)
    if random_start:
        delta = np.random.default_rng(seed).uniform(-eps, eps, size=x.shape)
        delta = np.clip(x + delta, 0.0, 1.0) - x
    x_adv = x + delta
    for _ in range(steps):
        _, g = input_grad(model, x_adv, _ce_sum(labels))
        x_adv = project_linf(x, delta + alpha * np.sign(g), eps)
        delta = x_adv - x
        if trace is not None:
            trace.append(x_adv.copy())
    return x_adv


def bim(model: Model, x: np.ndarray, labels: np.ndarray, eps: float, alpha: float, steps: int,
        trace: list | None = None) -> np.ndarray:
    """Basic iterative method: :func:`pgd` without a random start."""
    return pgd(model, x, labels, eps, alpha, steps, random_start=False, trace=trace)


# ---------------------------------------------------------------------------
# DeepFool
# ---------------------------------------------------------------------------


def class_gradients(model: Model, x: np.ndarray, classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Logits (n x K) and per-class input gradients (K x n x ...)."""
    grads = []
    logits = None
    for k in range(classes):
        z, g = input_grad(model, x, _column_sum(np.full(len(x), k)))
        logits = z if logits is None else logits
        grads.append(g)
    return logits, np.stack(grads)


def deepfool(model: Model, x: np.ndarray, steps: int = 20, overshoot: float = 0.02) -> AttackResult:
    """Iterative linearised step to the nearest decision boundary.

    ``extra["r_tot"]`` is the accumulated boundary-reaching perturbation; the
    returned images apply it scaled by ``1 + overshoot``.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    z0 = logits_of(model, x)
    classes = z0.shape[1]
    if classes < 2:
        raise ContractError("DeepFool needs at least two classes")
    orig = np.argmax(z0, axis=1)
    r_tot = np.zeros_like(x)
    iters = np.zeros(n, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    x_adv = x.copy()
    for _ in range(steps):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        z, grads = class_gradients(model, x_adv[idx], classes)
        flipped = np.argmax(z, axis=1) != orig[idx]
        for j, i in enumerate(idx):
            if flipped[j]:
                active[i] = False
                continue
            k0 = orig[i]
            w = grads[:, j] - grads[k0, j]
            f = z[j] - z[j, k0]
            norms = np.sqrt(np.sum(w.reshape(classes, -1) ** 2, axis=1))
            ratio = np.where(np.arange(classes) == k0, np.inf, np.abs(f) / np.maximum(norms, 1e-12))
            best = int(np.argmin(ratio))
            r = (np.abs(f[best]) / max(norms[best] ** 2, 1e-24)) * w[best]
            r_tot[i] += r
            iters[i] += 1
            x_adv[i] = np.clip(x[i] + (1.0 + overshoot) * r_tot[i], 0.0, 1.0)
    final = np.argmax(logits_of(model, x_adv), axis=1)
    success = final != orig
    return AttackResult(x_adv, success, iters, {"r_tot": r_tot, "converged": success})


# ---------------------------------------------------------------------------
# Carlini-Wagner L2
# ---------------------------------------------------------------------------


def _atanh(y: np.ndarray) -> np.ndarray:
    return np.arctanh(np.clip(y, -1 + 1e-6, 1 - 1e-6))


def cw_margin(z: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """``max_{j != y} z_j - z_y`` per image (positive means misclassified)."""
    other = z.copy()
    other[np.arange(len(z)), labels] = -np.inf
    return other.max(axis=1) - z[np.arange(len(z)), labels]


def cw_l2(model: Model, x: np.ndarray, labels: np.ndarray, c: float = 1.0, kappa: float = 2.0,
          steps: int = 500, lr: float = 0.01, abort_early: bool = True) -> AttackResult:
    """Untargeted L2 attack optimised with Adam in tanh space.

    Success requires a logit margin of at least ``kappa``; the smallest
    successful perturbation seen is returned (the input itself when none).
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(x)
    w = _atanh(2.0 * x - 1.0)
    m1 = np.zeros_like(w)
    m2 = np.zeros_like(w)
    b1, b2, eps_adam = 0.9, 0.999, 1e-8
    best_l2 = np.full(n, np.inf)
    best = x.copy()
    history: list[np.ndarray] = []
    iters = np.zeros(n, dtype=np.int64)
    prev = np.inf
    onehot = np.zeros((n, 0), dtype=bool)
    x_t = Tensor(x, dtype=np.float64)
    for step in range(1, steps + 1):
        leaf = _leaf(w)
        adv = (tanh(leaf) + 1.0) * 0.5
        z = model(adv)
        if onehot.shape[1] != z.shape[1]:
            onehot = np.eye(z.shape[1], dtype=bool)[labels]
        true = tsum(where(onehot, z, 0.0), axis=1)
        other = tmax(where(onehot, -1e9, z), axis=1)
        hinge = true - other + kappa
        hinge = where(hinge.data > 0, hinge, 0.0)
        diff = adv - x_t
        l2 = tsum(tsum(tsum(diff * diff, axis=-1), axis=-1), axis=-1)
        loss = tsum(l2 + c * hinge)
        backward(loss, [leaf])
        margin = cw_margin(z.data, labels)
        l2v = l2.data
        ok = (margin >= kappa) & (l2v < best_l2)
        best_l2[ok] = l2v[ok]
        best[ok] = adv.data[ok]
        iters[best_l2 == np.inf] = step
        history.append(best_l2.copy())
        g = leaf.grad
        m1 = b1 * m1 + (1 - b1) * g
        m2 = b2 * m2 + (1 - b2) * g * g
        w = w - lr * (m1 / (1 - b1**step)) / (np.sqrt(m2 / (1 - b2**step)) + eps_adam)
        if abort_early and step % max(steps // 10, 1) == 0:
            cur = float(loss.data)
            if cur > prev * 0.9999:
                break
            prev = cur
    success = np.isfinite(best_l2)
    return AttackResult(best, success, iters, {"l2": np.sqrt(best_l2), "history": np.array(history)})


# ---------------------------------------------------------------------------
# JSMA
# ---------------------------------------------------------------------------


def _pareto_front(u: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Mask of points not dominated by another (>= in both coordinates, > in one)."""
    order = np.lexsort((-w, -u))
    us, ws = u[order], w[order]
    first = np.searchsorted(-us, -us, side="left")
    cummax = np.maximum.accumulate(ws)
    prev = np.where(first > 0, cummax[np.maximum(first - 1, 0)], -np.inf)
    dominated = (prev >= ws) | (ws < ws[first])
    mask = np.empty(len(u), dtype=bool)
    mask[order] = ~dominated
    return mask


def best_saliency_pair(alpha: np.ndarray, beta: np.ndarray, allowed: np.ndarray) -> tuple[int, int] | None:
    """Pair ``p < q`` maximising ``(a_p + a_q) * -(b_p + b_q)`` with ``a_p + a_q > 0`` and ``b_p + b_q < 0``.

    Where the constraints hold the product grows with ``a`` and with ``-b``, so
    a member of the optimal pair can only be dominated by its partner: both
    lie in the first two Pareto layers of ``(a, -b)``.  The search is exhaustive
    over those layers; ties go to the lexicographically lowest pair.
    """
    cand = np.flatnonzero(allowed)
    if len(cand) < 2:
        return None
    a = alpha[cand]
    nb = -beta[cand]
    layer1 = _pareto_front(a, nb)
    rest = np.flatnonzero(~layer1)
    keep = layer1.copy()
    if len(rest):
        keep[rest[_pareto_front(a[rest], nb[rest])]] = True
    sub = np.flatnonzero(keep)
    sa = a[sub][:, None] + a[sub][None, :]
    sb = nb[sub][:, None] + nb[sub][None, :]
    val = np.where((sa > 0) & (sb > 0), sa * sb, 0.0)
    np.fill_diagonal(val, 0.0)
    best = val.max()
    if best <= 0.0:
        return None
    i, j = np.nonzero(np.triu(val == best, k=1))
    return min(tuple(sorted((int(cand[sub[x]]), int(cand[sub[y]])))) for x, y in zip(i, j))


def jsma_budget(num_values: int, gamma: float) -> int:
    return int(math.ceil(round(gamma * num_values, 9)))


def jsma(model: Model, x: np.ndarray, targets: np.ndarray, gamma: float = 0.02) -> AttackResult:
    """Targeted saliency-map attack that saturates pairs of input values to 1.

    At most ``ceil(gamma * values)`` values per image are modified.
    """
    x = np.asarray(x, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    n = len(x)
    size = x[0].size
    budget = jsma_budget(size, gamma)
    x_adv = x.copy()
    modified = np.zeros((n, size), dtype=bool)
    active = np.ones(n, dtype=bool)
    iters = np.zeros(n, dtype=np.int64)
    while True:
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        z, g_t = input_grad(model, x_adv[idx], _column_sum(targets[idx]))
        _, g_all = input_grad(model, x_adv[idx], lambda zz: tsum(zz))
        pred = np.argmax(z, axis=1)
        for j, i in enumerate(idx):
            if pred[j] == targets[i] or modified[i].sum() + 2 > budget:
                active[i] = False
                continue
            a = g_t[j].reshape(-1)
            b = g_all[j].reshape(-1) - a
            flat = x_adv[i].reshape(-1)
            pair = best_saliency_pair(a, b, (~modified[i]) & (flat < 1.0))
            if pair is None:
                active[i] = False
                continue
            p, q = pair
            flat[p] = flat[q] = 1.0
            modified[i, [p, q]] = True
            iters[i] += 1
    success = np.argmax(logits_of(model, x_adv), axis=1) == targets
    return AttackResult(x_adv, success, iters, {"modified": modified.sum(axis=1), "budget": budget})


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def run_attack(spec: AttackSpec, model: Model, x: np.ndarray, labels: np.ndarray,
               classes: int, seed: int = 0, chunk: int = 64) -> AttackResult:
    """Apply ``spec`` to ``x`` in chunks; JSMA targets ``(label + 1) mod classes``."""
    parts = []
    for start in range(0, len(x), chunk):
        xb, yb = x[start:start + chunk], labels[start:start + chunk]
        a = spec.algorithm
        if a == "FGSM":
            adv = fgsm(model, xb, yb, spec.eps)
            res = AttackResult(adv, np.argmax(logits_of(model, adv), 1) != yb, np.ones(len(xb), np.int64))
        elif a in ("PGD", "BIM"):
            adv = pgd(model, xb, yb, spec.eps, spec.alpha, spec.steps,
                      random_start=spec.random_start and a == "PGD", seed=seed + start)
            res = AttackResult(adv, np.argmax(logits_of(model, adv), 1) != yb,
                               np.full(len(xb), spec.steps, np.int64))
        elif a == "DeepFool":
            res = deepfool(model, xb, spec.steps, spec.overshoot)
        elif a == "CW":
            res = cw_l2(model, xb, yb, spec.c, spec.kappa, spec.steps, spec.lr)
        else:
            res = jsma(model, xb, (yb + 1) % classes, spec.gamma)
        parts.append(res)
    return AttackResult(np.concatenate([p.x_adv for p in parts]),
                        np.concatenate([p.success for p in parts]),
                        np.concatenate([p.iterations for p in parts]))
