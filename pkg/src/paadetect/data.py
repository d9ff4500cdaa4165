"""Synthetic shape-and-colour image datasets stored as PPM files plus an index."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .tensor import ConfigurationError, ContractError

SHAPES = ("circle", "square", "triangle", "cross")
PALETTE = (
    (0.90, 0.20, 0.15),
    (0.15, 0.45, 0.90),
    (0.20, 0.80, 0.25),
    (0.95, 0.80, 0.10),
    (0.70, 0.25, 0.85),
    (0.10, 0.80, 0.80),
)
SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)


@dataclass
class SyntheticDatasetSpec:
    classes: int = 8
    per_class: int = 250
    image_size: int = 32
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigurationError("a dataset needs at least two classes")
        if self.classes > len(SHAPES) * len(PALETTE):
            raise ConfigurationError(f"at most {len(SHAPES) * len(PALETTE)} classes are available")
        if self.per_class < 1 or self.image_size < 8:
            raise ConfigurationError("per_class must be >= 1 and image_size >= 8")
        if self.noise < 0:
            raise ConfigurationError("noise must be non-negative")

    @classmethod
    def from_json(cls, path) -> "SyntheticDatasetSpec":
        return cls(**json.loads(Path(path).read_text()))


def class_shape_colour(label: int) -> tuple[str, tuple[float, float, float]]:
    return SHAPES[label % len(SHAPES)], PALETTE[label // len(SHAPES)]


def shape_mask(shape: str, size: int, cy: float, cx: float, radius: float) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy, dx = y - cy, x - cx
    if shape == "circle":
        return dy * dy + dx * dx <= radius * radius
    if shape == "square":
        return (np.abs(dy) <= radius * 0.85) & (np.abs(dx) <= radius * 0.85)
    if shape == "triangle":
        # apex up; base at cy + r/2, apex at cy - r
        inside_y = (dy >= -radius) & (dy <= radius * 0.6)
        half = (dy + radius) / 1.6 * 0.95
        return inside_y & (np.abs(dx) <= half)
    if shape == "cross":
        arm = radius * 0.3
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= radius)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= radius))
    raise ConfigurationError(f"unknown shape {shape!r}")


def render(label: int, size: int, rng: np.random.Generator, noise: float) -> np.ndarray:
    """One H x W x 3 image in [0, 1] for class ``label``."""
    shape, colour = class_shape_colour(label)
    radius = size * rng.uniform(0.22, 0.34)
    cy = size / 2 + rng.uniform(-0.12, 0.12) * size
    cx = size / 2 + rng.uniform(-0.12, 0.12) * size
    bg = rng.uniform(0.1, 0.35)
    img = np.full((size, size, 3), bg)
    img[shape_mask(shape, size, cy, cx, radius)] = colour
    img += noise * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def to_bytes(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def assign_splits(n: int, seed: int) -> np.ndarray:
    """Seeded 80/10/10 split labels for ``n`` items."""
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_val = int(round(SPLIT_FRACTIONS[1] * n))
    out = np.empty(n, dtype=object)
    out[order[:n_train]] = "train"
    out[order[n_train:n_train + n_val]] = "val"
    out[order[n_train + n_val:]] = "test"
    return out


def generate_dataset(spec: SyntheticDatasetSpec, out_dir) -> Path:
    """Write ``images/*.ppm``, ``index.csv`` and ``spec.json`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    n = spec.classes * spec.per_class
    labels = np.repeat(np.arange(spec.classes), spec.per_class)
    splits = assign_splits(n, spec.seed + 1)
    rows = []
    for i in range(n):
        name = f"images/img_{i:05d}.ppm"
        img = render(int(labels[i]), spec.image_size, rng, spec.noise)
        Image.fromarray(to_bytes(img), mode="RGB").save(out / name, format="PPM")
        rows.append((name, int(labels[i]), splits[i]))
    with open(out / "index.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["filename", "label", "split"])
        w.writerows(rows)
    (out / "spec.json").write_text(json.dumps(asdict(spec), indent=2, sort_keys=True) + "\n")
    return out


@dataclass
class Dataset:
    images: np.ndarray  # N x 3 x H x W float32 in [0, 1]
    labels: np.ndarray
    splits: np.ndarray
    files: list[str]

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        mask = self.splits == name
        return self.images[mask], self.labels[mask]

    def indices(self, name: str) -> np.ndarray:
        return np.flatnonzero(self.splits == name)

    @property
    def classes(self) -> int:
        return int(self.labels.max()) + 1


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_image(path, chw: np.ndarray) -> None:
    Image.fromarray(to_bytes(np.asarray(chw).transpose(1, 2, 0)), mode="RGB").save(path, format="PPM")


def load_dataset(data_dir) -> Dataset:
    root = Path(data_dir)
    index = root / "index.csv"
    if not index.exists():
        raise ContractError(f"{index} not found")
    with open(index, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ContractError(f"{index} lists no images")
    images = np.stack([read_image(root / r["filename"]) for r in rows])
    labels = np.array([int(r["label"]) for r in rows], dtype=np.int64)
    splits = np.array([r.get("split") or "train" for r in rows])
    return Dataset(images, labels, splits, [r["filename"] for r in rows])
