"""Figure rendering for reports: image grids, loss curves and 2-D code
scatter plots. Every figure is written to a file; nothing is shown."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from decgan.evaluation import GridSpec  # noqa: E402

plt.rcParams["figure.dpi"] = 120
plt.rcParams["savefig.bbox"] = "tight"
plt.rcParams["axes.spines.top"] = False
plt.rcParams["axes.spines.right"] = False


def save_grid(grid: GridSpec, path, sep: int = 2) -> Path:
    """Write the tiled grid as a lossless PNG (exact pixels, 2-px separators)
    with its captions in a ``.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tiled = grid.tile(sep)
    Image.fromarray(tiled[..., 0] if tiled.shape[-1] == 1 else tiled).save(path)
    path.with_suffix(".json").write_text(json.dumps(grid.captions(), indent=1))
    return path


def plot_grid(grid: GridSpec, path, cell_inches: float = 0.8) -> Path:
    """Captioned matplotlib rendering of a grid, for human inspection."""
    rows, cols = grid.shape
    fig, axes = plt.subplots(rows, cols, figsize=(cols * cell_inches + 1.2, rows * cell_inches + 0.4),
                             squeeze=False)
    for r in range(rows):
        for c in range(cols):
            ax = axes[r, c]
            img = (grid.cells[r, c].transpose(1, 2, 0) + 1.0) / 2.0
            ax.imshow(img[..., 0] if img.shape[-1] == 1 else img, cmap="gray", vmin=0, vmax=1)
            ax.set_xticks([])
            ax.set_yticks([])
            for s in ax.spines.values():
                s.set_visible(False)
            if c == 0:
                ax.set_ylabel(grid.row_captions[r], fontsize=7, rotation=0, ha="right", va="center")
            if r == 0 and c < len(grid.col_captions):
                ax.set_title(grid.col_captions[c], fontsize=6)
    if grid.title:
        fig.suptitle(grid.title, fontsize=9)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_losses(records: list[dict], keys, path, title: str = "", smooth: int = 50) -> Path:
    """Loss curves from a JSONL log, raw (faint) and moving-average (solid), log y-axis."""
    fig, ax = plt.subplots(figsize=(6.0, 3.5))
    steps = np.array([r["step"] for r in records])
    for i, key in enumerate(keys):
        y = np.array([r[key] for r in records], dtype=float)
        color = f"C{i}"
        ax.plot(steps, y, color=color, alpha=0.25, linewidth=0.6)
        if len(y) >= smooth > 1:
            ma = np.convolve(y, np.ones(smooth) / smooth, mode="valid")
            ax.plot(steps[smooth - 1:], ma, color=color, linewidth=1.4, label=key)
        else:
            ax.plot([], [], color=color, label=key)
    if all(r[k] > 0 for r in records for k in keys):
        ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7, frameon=False)
    if title:
        ax.set_title(title, fontsize=9)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_scatter_2d(points, labels, path, title: str = "") -> Path:
    """Scatter of a 2-D projection coloured by label."""
    pts = np.asarray(points)
    labels = np.asarray(labels)
    fig, ax = plt.subplots(figsize=(4.5, 4.0))
    for k in np.unique(labels):
        m = labels == k
        ax.scatter(pts[m, 0], pts[m, 1], s=3, alpha=0.6, label=str(k), color=plt.cm.tab10(int(k) % 10))
    ax.legend(fontsize=6, markerscale=3, frameon=False, ncol=2)
    ax.set_xlabel("pc0")
    ax.set_ylabel("pc1")
    if title:
        ax.set_title(title, fontsize=9)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path
