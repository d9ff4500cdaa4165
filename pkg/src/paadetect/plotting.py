"""Figures written to files with the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def score_histograms(clean: np.ndarray, attacked: Mapping[str, np.ndarray], theta: float, path) -> Path:
    n = max(len(attacked), 1)
    cols = min(n, 3)
    rows = int(np.ceil(n / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(4 * cols, 3 * rows), squeeze=False)
    lo = min([clean.min()] + [a.min() for a in attacked.values()])
    bins = np.linspace(lo, 1.0, 30)
    panels = list(attacked.items()) or [("clean", clean)]
    for ax, (name, scores) in zip(axes.flat, panels):
        ax.hist(clean, bins=bins, alpha=0.6, label="clean")
        if name != "clean":
            ax.hist(scores, bins=bins, alpha=0.6, label="attacked")
        ax.axvline(theta, color="k", ls="--", lw=1)
        ax.set_title(name, fontsize=9)
        ax.set_xlabel("max prototype cosine")
        ax.legend(fontsize=7)
    for ax in list(axes.flat)[n:]:
        ax.axis("off")
    return _save(fig, path)


def detection_bars(names: Sequence[str], dr_attacked: Sequence[float], dr_clean: float, path) -> Path:
    fig, ax = plt.subplots(figsize=(1.2 * len(names) + 2, 3))
    x = np.arange(len(names))
    ax.bar(x, dr_attacked, color="tab:red")
    ax.axhline(dr_clean, color="tab:blue", ls="--", label=f"DR clean = {dr_clean:.3f}")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylim(0, 1)
    ax.set_ylabel("DR attacked")
    ax.legend(fontsize=8)
    return _save(fig, path)


def training_curves(history: Sequence[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3))
    ep = [h["epoch"] for h in history]
    for key in ("loss_pm", "loss_pce", "loss_icl", "loss_total"):
        ax.plot(ep, [h[key] for h in history], label=key[5:])
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    return _save(fig, path)


def ablation_bars(rows: Sequence[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(1.4 * len(rows) + 2, 3))
    x = np.arange(len(rows))
    ax.bar(x - 0.2, [r["dr_clean"] for r in rows], width=0.4, label="DR clean")
    ax.bar(x + 0.2, [r["dr_attacked_avg"] for r in rows], width=0.4, label="DR attacked (avg)")
    ax.set_xticks(x)
    ax.set_xticklabels([r["name"] for r in rows], rotation=30, ha="right", fontsize=8)
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    return _save(fig, path)


def bench_plot(rows: Sequence[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3))
    for workers in sorted({r["workers"] for r in rows}):
        sub = [r for r in rows if r["workers"] == workers]
        ax.plot([r["size"] for r in sub], [r["ratio"] for r in sub], marker="o", label=f"{workers} workers")
    ax.axhline(1.0, color="k", lw=0.8)
    ax.set_xlabel("input side")
    ax.set_ylabel("parallel / sequential time")
    ax.legend(fontsize=8)
    return _save(fig, path)
