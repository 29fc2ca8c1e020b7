"""Matplotlib renderers for the report paths; figures land next to the
delimited output. Headless backend, pinned metadata for byte-stable files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_META = {"Software": "sasenet"}


def _save(fig, path):
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)


def scaling_figure(curves, path) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for curve in curves:
        ns = [n for n, _ in curve.points]
        fs = [f for _, f in curve.points]
        ax.loglog(ns, fs, marker="o", label=f"{curve.mechanism} (slope {curve.slope:.2f})")
    ax.set_xlabel("token count N = H*W")
    ax.set_ylabel("FLOPs")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    _save(fig, path)


def training_figure(records, path) -> None:
    steps = [r.step for r in records]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
    ax1.plot(steps, [r.loss for r in records])
    ax1.set_xlabel("step")
    ax1.set_ylabel("loss")
    ax1.grid(alpha=0.3)
    ax2.plot(steps, [r.acc for r in records])
    ax2.set_xlabel("step")
    ax2.set_ylabel("batch accuracy")
    ax2.set_ylim(0, 1.02)
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def layer_bar_figure(report, path, top: int = 20) -> None:
    entries = [e for e in report.entries if e.params]
    entries.sort(key=lambda e: e.params, reverse=True)
    entries = entries[:top]
    fig, ax = plt.subplots(figsize=(7, max(2.5, 0.3 * len(entries))))
    ax.barh([e.name for e in entries][::-1], [e.params for e in entries][::-1])
    ax.set_xlabel("parameters")
    fig.tight_layout()
    _save(fig, path)


def image_figure(img: np.ndarray, path) -> None:
    """img: (3, S, S) in (-1, 1)."""
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(np.clip((img.transpose(1, 2, 0) + 1) / 2, 0, 1))
    ax.axis("off")
    fig.tight_layout()
    _save(fig, path)


def masks_figure(masks: dict[str, np.ndarray], path, cols: int = 4) -> None:
    names = list(masks)
    rows = max(1, (len(names) + cols - 1) // cols)
    fig, axes = plt.subplots(rows, cols, figsize=(2.2 * cols, 2.2 * rows))
    axes = np.atleast_1d(axes).reshape(-1)
    for ax in axes:
        ax.axis("off")
    for ax, name in zip(axes, names):
        ax.imshow(masks[name], cmap="magma", vmin=0, vmax=1)
        ax.set_title(name, fontsize=6)
    fig.tight_layout()
    _save(fig, path)
