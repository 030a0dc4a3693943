"""Figure rendering for the report commands. Everything writes PNG files."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PALETTE = np.array(
    [[0, 0, 0], [228, 26, 28], [55, 126, 184], [77, 175, 74], [152, 78, 163], [255, 127, 0]],
    dtype=np.uint8,
)
IGNORE_COLOR = np.array([255, 255, 255], dtype=np.uint8)


def _style(ax, grid=True):
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    if grid:
        ax.grid(linestyle="dotted", linewidth=0.5, color="0.6")


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def colorize(labels: np.ndarray, ignore: int = 255) -> np.ndarray:
    out = PALETTE[np.clip(labels, 0, len(PALETTE) - 1) % len(PALETTE)]
    out[labels == ignore] = IGNORE_COLOR
    return out


def plot_training_curves(history: list[dict], path, keys=("total", "cls", "seg", "aff", "u", "c")):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    it = [row["iter"] for row in history]
    for key in keys:
        values = np.array([row[key] for row in history])
        if np.any(values != 0):
            ax.plot(it, values, label=key, linewidth=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(frameon=False, ncol=3, fontsize=8)
    _style(ax)
    return _save(fig, path)


def plot_entropy_profile(profile: np.ndarray, path, label: str | None = None):
    """Dots per head, one column per layer."""
    layers, heads = profile.shape
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for layer in range(layers):
        ax.scatter(np.full(heads, layer), profile[layer], s=18, color="C0", alpha=0.8)
    ax.plot(range(layers), profile.mean(axis=1), color="C1", linewidth=1, label="head mean")
    ax.set_xlabel("layer")
    ax.set_ylabel("average attention entropy (nats)")
    ax.set_xticks(range(layers))
    if label:
        ax.set_title(label, fontsize=9)
    ax.legend(frameon=False, fontsize=8)
    _style(ax)
    return _save(fig, path)


def plot_cka_heatmap(matrix: np.ndarray, path, label: str | None = None):
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    im = ax.imshow(matrix, vmin=0.0, vmax=1.0, cmap="magma", origin="lower")
    ax.set_xlabel("layer")
    ax.set_ylabel("layer")
    n = matrix.shape[0]
    ax.set_xticks(range(n))
    ax.set_yticks(range(n))
    fig.colorbar(im, ax=ax, label="linear CKA")
    if label:
        ax.set_title(label, fontsize=9)
    return _save(fig, path)


def plot_cam_panel(samples, class_names, path, patch_size: int = 8):
    """Rows: image, per-class CAM overlays, pseudo label, ground truth.

    ``samples`` is a list of (pixels, cam (N, C), pseudo grid, gt mask, labels).
    """
    n = len(samples)
    c = len(class_names)
    cols = 3 + c
    fig, axes = plt.subplots(n, cols, figsize=(1.6 * cols, 1.6 * n), squeeze=False)
    for r, (pixels, cam, pseudo, gt, labels) in enumerate(samples):
        h, w = pseudo.shape
        axes[r, 0].imshow(pixels)
        for k in range(c):
            heat = cam[:, k].reshape(h, w)
            heat = np.kron(heat, np.ones((patch_size, patch_size)))
            axes[r, 1 + k].imshow(pixels)
            axes[r, 1 + k].imshow(heat, cmap="jet", alpha=0.45 if labels[k] else 0.15, vmin=0, vmax=1)
        axes[r, 1 + c].imshow(colorize(np.kron(pseudo, np.ones((patch_size, patch_size), int))))
        axes[r, 2 + c].imshow(colorize(gt.astype(int)))
        for ax in axes[r]:
            ax.set_xticks([])
            ax.set_yticks([])
    titles = ["image", *[f"CAM {name}" for name in class_names], "pseudo", "ground truth"]
    for ax, title in zip(axes[0], titles):
        ax.set_title(title, fontsize=8)
    return _save(fig, path)


def plot_ablation(rows: list[dict], path, metric: str = "miou_pseudo"):
    """Bar per configuration (mean over seeds) with individual seeds as dots."""
    names = list(dict.fromkeys(row["config"] for row in rows))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for i, name in enumerate(names):
        vals = np.array([row[metric] for row in rows if row["config"] == name])
        ax.bar(i, vals.mean(), color=f"C{i}", alpha=0.6, width=0.6)
        ax.scatter(np.full(len(vals), i), vals, color="k", s=12, zorder=3)
        ax.text(i, vals.mean(), f"{vals.mean():.1f}", ha="center", va="bottom", fontsize=8)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, fontsize=8)
    ax.set_ylabel(f"{metric} (%)")
    _style(ax)
    return _save(fig, path)


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path
