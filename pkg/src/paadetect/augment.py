"""Image transformations and per-image selection of the hardest view pair."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import ConfigurationError, ContractError, Tensor, no_grad

KINDS = (
    "identity",
    "horizontal-flip",
    "random-crop-resize",
    "rotation",
    "color-jitter",
    "grayscale",
    "gaussian-noise",
)

_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class Transform:
    kind: str
    params: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown transform kind {self.kind!r}")

    def param(self, key, default=None):
        return dict(self.params).get(key, default)

    def __str__(self) -> str:
        args = ",".join(f"{k}={v:g}" if isinstance(v, float) else f"{k}={v}" for k, v in self.params)
        return f"{self.kind}({args})" if args else self.kind


@dataclass(frozen=True)
class TransformPair:
    t: Transform
    s: Transform

    def __post_init__(self):
        if self.t == self.s and self.t.kind != "identity":
            raise ConfigurationError("a transform pair must use two different transforms")


IDENTITY = Transform("identity")


def make_transform(kind: str, seed: int = 0, **params) -> Transform:
    return Transform(kind, tuple(sorted(params.items())), seed)


# ---------------------------------------------------------------------------
# application
# ---------------------------------------------------------------------------


def crop_resize(x: np.ndarray, top: float, left: float, size: float) -> np.ndarray:
    """Bilinear resample of the square window (fractions of the side) back to full size.

    Sampling is corner-aligned: output pixel ``u`` maps to source row
    ``top*(H-1) + u * size*(H-1)/(H-1)``.
    """
    h, w = x.shape[-2:]
    ys = top * (h - 1) + np.arange(h) * (size * (h - 1)) / max(h - 1, 1)
    xs = left * (w - 1) + np.arange(w) * (size * (w - 1)) / max(w - 1, 1)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top_row = x[..., y0, :][..., :, x0] * (1 - wx) + x[..., y0, :][..., :, x1] * wx
    bot_row = x[..., y1, :][..., :, x0] * (1 - wx) + x[..., y1, :][..., :, x1] * wx
    return top_row * (1 - wy) + bot_row * wy


def apply(x: np.ndarray, tr: Transform) -> np.ndarray:
    """Apply ``tr`` to one image (C x H x W) or a batch (B x C x H x W) with values in [0, 1]."""
    x = np.asarray(x)
    dtype = x.dtype if x.dtype.kind == "f" else np.float32
    x = x.astype(dtype, copy=False)
    k = tr.kind
    if k == "identity":
        out = x.copy()
    elif k == "horizontal-flip":
        out = x[..., ::-1].copy()
    elif k == "rotation":
        out = np.rot90(x, int(tr.param("quarter_turns", 1)) % 4, axes=(-2, -1)).copy()
    elif k == "random-crop-resize":
        out = crop_resize(x, tr.param("top"), tr.param("left"), tr.param("size"))
    elif k == "color-jitter":
        b = tr.param("brightness", 1.0)
        c = tr.param("contrast", 1.0)
        y = x * b
        mean = y.mean(axis=(-3, -2, -1), keepdims=True)
        out = (y - mean) * c + mean
    elif k == "grayscale":
        luma = np.tensordot(_LUMA.astype(dtype), np.moveaxis(x, -3, 0), axes=(0, 0))
        out = np.repeat(np.expand_dims(luma, -3), x.shape[-3], axis=-3)
    elif k == "gaussian-noise":
        sigma = float(tr.param("sigma", 0.0))
        if sigma == 0.0:
            out = x.copy()
        else:
            noise = np.random.default_rng(tr.seed).standard_normal(x.shape)
            out = x + sigma * noise
    else:  # pragma: no cover - guarded by Transform
        raise ConfigurationError(f"unknown transform kind {k!r}")
    return np.clip(out, 0.0, 1.0).astype(dtype, copy=False)


# ---------------------------------------------------------------------------
# candidate pools
# ---------------------------------------------------------------------------


@dataclass
class AugmentConfig:
    kinds: tuple[str, ...] = ("horizontal-flip", "random-crop-resize", "rotation",
                              "color-jitter", "grayscale", "gaussian-noise")
    sigma_range: tuple[float, float] = (0.02, 0.1)
    brightness: float = 0.4
    contrast: float = 0.4
    crop_scale: tuple[float, float] = (0.6, 0.9)
    q: int = 8
    transforms_per_pool: int = 4

    def __post_init__(self):
        self.kinds = tuple(self.kinds)
        self.sigma_range = tuple(self.sigma_range)
        self.crop_scale = tuple(self.crop_scale)
        for kind in self.kinds:
            if kind not in KINDS:
                raise ConfigurationError(f"unknown transform kind {kind!r}")
        if self.q < 1:
            raise ConfigurationError("augment.q must be >= 1")
        if self.transforms_per_pool < 2 or self.transforms_per_pool > len(self.kinds):
            raise ConfigurationError("augment.transforms_per_pool must lie in [2, number of kinds]")


def random_transform(kind: str, rng: np.random.Generator, cfg: AugmentConfig) -> Transform:
    seed = int(rng.integers(2**31))
    if kind == "random-crop-resize":
        size = float(rng.uniform(*cfg.crop_scale))
        return make_transform(kind, seed, size=size, top=float(rng.uniform(0, 1 - size)),
                              left=float(rng.uniform(0, 1 - size)))
    if kind == "rotation":
        return make_transform(kind, seed, quarter_turns=int(rng.integers(1, 4)))
    if kind == "color-jitter":
        return make_transform(kind, seed,
                              brightness=float(rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)),
                              contrast=float(rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)))
    if kind == "gaussian-noise":
        return make_transform(kind, seed, sigma=float(rng.uniform(*cfg.sigma_range)))
    return make_transform(kind, seed)


def sample_candidate_pool(rng: np.random.Generator, cfg: AugmentConfig) -> list[TransformPair]:
    """``cfg.q`` ordered pairs over a few freshly drawn transforms of distinct kinds.

    Drawing pairs from a small transform set keeps the number of distinct
    views (and hence encoder passes during selection) bounded.
    """
    kinds = rng.choice(len(cfg.kinds), size=cfg.transforms_per_pool, replace=False)
    transforms = [random_transform(cfg.kinds[i], rng, cfg) for i in sorted(kinds)]
    ordered = list(itertools.permutations(range(len(transforms)), 2))
    pick = rng.choice(len(ordered), size=min(cfg.q, len(ordered)), replace=False)
    return [TransformPair(transforms[ordered[i][0]], transforms[ordered[i][1]]) for i in sorted(pick)]


# ---------------------------------------------------------------------------
# selection
# ---------------------------------------------------------------------------


def _embed(encoder: Callable, x: np.ndarray) -> np.ndarray:
    out = encoder(x)
    return np.asarray(out.data if isinstance(out, Tensor) else out, dtype=np.float64)


def per_anchor_pm(v_t: np.ndarray, v_s: np.ndarray, tau: float) -> np.ndarray:
    """Per-image pixel-mapping loss terms (numpy, no gradient)."""
    logits = (v_s @ v_t.T) / tau  # row i: anchor f(x_i^s) against f(x_b^t)
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    return lse - np.diag(logits)


@dataclass
class Selection:
    pairs: list[TransformPair]
    choice: np.ndarray  # candidate index per image
    losses: np.ndarray  # candidates x images
    view_t: np.ndarray
    view_s: np.ndarray


def candidate_losses(batch: np.ndarray, candidates: Sequence[TransformPair], encoder: Callable,
                     tau: float, views: dict | None = None) -> tuple[np.ndarray, dict]:
    """Loss of every image under every candidate pair; ``views`` caches transformed batches."""
    if not candidates:
        raise ContractError("select_pair needs at least one candidate pair")
    views = {} if views is None else views
    emb: dict[Transform, np.ndarray] = {}

    def embedded(tr: Transform) -> np.ndarray:
        if tr not in emb:
            if tr not in views:
                views[tr] = apply(batch, tr)
            emb[tr] = _embed(encoder, views[tr])
        return emb[tr]

    with no_grad():
        losses = np.stack([per_anchor_pm(embedded(p.t), embedded(p.s), tau) for p in candidates])
    return losses, views


def select_pair(batch: np.ndarray, candidates: Sequence[TransformPair], encoder: Callable,
                tau: float) -> Selection:
    """For every image pick the candidate pair with the largest pixel-mapping loss.

    Ties go to the lowest candidate index.  ``encoder`` maps a batch to unit
    embeddings and should be in eval mode.
    """
    losses, views = candidate_losses(batch, candidates, encoder, tau)
    choice = np.argmax(losses, axis=0)
    pairs = [candidates[c] for c in choice]
    view_t = np.stack([views[candidates[c].t][i] for i, c in enumerate(choice)])
    view_s = np.stack([views[candidates[c].s][i] for i, c in enumerate(choice)])
    return Selection(pairs, choice, losses, view_t, view_s)
