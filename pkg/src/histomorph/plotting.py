"""Figures written next to reports: overlays, augmentation grids, confusion matrices, curves."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .harmonizer import CELL_TYPE_NAMES  # noqa: E402

# cell-type colour coding (label plane value -> RGB)
PALETTE = {
    1: (255, 0, 0),  # lymphocyte: red
    2: (0, 255, 0),  # epithelial: green
    3: (0, 0, 255),  # plasma: blue
    4: (255, 165, 0),  # neutrophil: orange
    5: (255, 0, 255),  # eosinophil: magenta
    6: (255, 255, 0),  # connective: yellow
    7: (255, 255, 255),  # nucleus of unknown type
}

golden_mean = (np.sqrt(5) - 1.0) / 2.0

params = {
    "font.size": 8,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 150,
    "savefig.bbox": "tight",
}


def new(width=4.0, height=None, nrows=1, ncols=1):
    plt.rcParams.update(params)
    height = height or width * golden_mean
    return plt.subplots(nrows=nrows, ncols=ncols, figsize=(width, height), squeeze=False)


def save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def colorize_types(label_plane) -> np.ndarray:
    """Label plane (0..7) -> RGB image; background stays black."""
    label_plane = np.asarray(label_plane)
    lut = np.zeros((256, 3), dtype=np.uint8)
    for k, rgb in PALETTE.items():
        lut[k] = rgb
    return lut[label_plane]


def overlay(image, label_plane, alpha=0.6) -> np.ndarray:
    """Blend the colour-coded cell types onto an 8-bit RGB image (nuclei pixels only)."""
    image = np.asarray(image, dtype=np.float32)
    colors = colorize_types(label_plane).astype(np.float32)
    nuclei = (np.asarray(label_plane) > 0)[..., None]
    out = np.where(nuclei, (1 - alpha) * image + alpha * colors, image)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def label_plane_from_output(nuclei_prob, type_prob, threshold=0.5) -> np.ndarray:
    """Predicted label plane from H x W nuclei probs and 7 x H x W type probs."""
    nuclei = np.asarray(nuclei_prob) >= threshold
    types = np.argmax(np.asarray(type_prob)[1:], axis=0) + 1
    return np.where(nuclei, types, 0).astype(np.uint8)


def augmentation_grid(original, augmented, path, ncols=3) -> Path:
    tiles = [original] + list(augmented)
    nrows = int(np.ceil(len(tiles) / ncols))
    fig, axes = new(2.0 * ncols, 2.0 * nrows, nrows, ncols)
    for k, ax in enumerate(axes.flat):
        ax.axis("off")
        if k < len(tiles):
            ax.imshow(tiles[k])
            if k == 0:
                for s in ax.spines.values():
                    s.set_visible(True)
                ax.set_title("original", color="tab:blue")
    return save(fig, path)


def confusion_figure(cm, categories, path) -> Path:
    cm = np.asarray(cm)
    n = len(categories)
    fig, axes = new(1.2 + 0.45 * n, 1.0 + 0.45 * n)
    ax = axes[0, 0]
    norm = cm / np.maximum(cm.sum(axis=1, keepdims=True), 1)
    ax.imshow(norm, cmap="Blues", vmin=0, vmax=1)
    ax.set_xticks(range(n), categories, rotation=45, ha="right")
    ax.set_yticks(range(n), categories)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for i in range(n):
        for j in range(n):
            ax.text(j, i, str(cm[i, j]), ha="center", va="center", fontsize=6,
                    color="white" if norm[i, j] > 0.5 else "black")
    return save(fig, path)


def per_class_pq_figure(per_class: dict, path) -> Path:
    fig, axes = new(3.6)
    ax = axes[0, 0]
    types = sorted(per_class)
    ax.bar([CELL_TYPE_NAMES[t] for t in types], [per_class[t] for t in types],
           color=[np.array(PALETTE[t]) / 255 for t in types], edgecolor="black", linewidth=0.4)
    ax.set_ylim(0, 1)
    ax.set_ylabel("PQ")
    ax.tick_params(axis="x", rotation=45)
    return save(fig, path)


def training_curves(history: list, path) -> Path:
    fig, axes = new(6.0, 2.4, 1, 2)
    ax_loss, ax_val = axes[0]
    stages = []
    for h in history:
        if h["stage"] not in stages:
            stages.append(h["stage"])
    x0 = 0
    for s in stages:
        rows = [h for h in history if h["stage"] == s]
        xs = np.arange(x0, x0 + len(rows))
        ax_loss.plot(xs, [h["train_loss"] for h in rows], marker="o", label=s)
        vals = [h["val_metric"] for h in rows]
        if any(v is not None for v in vals):
            ax_val.plot(xs, [np.nan if v is None else v for v in vals], marker="o")
        x0 += len(rows)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss")
    ax_val.set_xlabel("epoch")
    ax_val.set_ylabel("validation metric")
    ax_loss.legend(frameon=False, fontsize=5)
    return save(fig, path)
