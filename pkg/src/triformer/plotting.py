"""Figures written next to the JSON outputs: class maps, training curves, cost charts."""

from __future__ import annotations

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# index 0 (unlabeled) is black; classes cycle through these 20 colours
_CLASS_COLORS = [
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
    (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212),
    (0, 128, 128), (220, 190, 255), (170, 110, 40), (255, 250, 200), (128, 0, 0),
    (170, 255, 195), (128, 128, 0), (255, 215, 180), (0, 0, 128), (128, 128, 128),
]

RC = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
    "svg.hashsalt": "triformer",
}


def palette(num_classes: int) -> np.ndarray:
    """``[num_classes + 1, 3]`` uint8 colours; row 0 is black."""
    rows = [(0, 0, 0)] + [_CLASS_COLORS[i % len(_CLASS_COLORS)] for i in range(num_classes)]
    return np.array(rows, dtype=np.uint8)


def save_class_map(class_map: np.ndarray, num_classes: int, path) -> None:
    """8-bit indexed PNG; pixel value = class label (0 unlabeled)."""
    from PIL import Image

    class_map = np.asarray(class_map)
    img = Image.fromarray(class_map.astype(np.uint8), mode="P")
    pal = palette(max(num_classes, 0)).reshape(-1).tolist()
    img.putpalette(pal + [0] * (768 - len(pal)))
    img.save(path, format="PNG")


def plot_maps(prediction: np.ndarray, truth: np.ndarray, num_classes: int, path, title: str = "") -> None:
    """Ground truth and predicted class maps side by side."""
    pal = palette(num_classes).astype(float) / 255.0
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 2, figsize=(7, 3.6))
        for ax, img, name in zip(axes, (truth, prediction), ("ground truth", "prediction")):
            ax.imshow(pal[np.asarray(img)], interpolation="nearest")
            ax.set_title(name)
            ax.set_xticks([])
            ax.set_yticks([])
        if title:
            fig.suptitle(title)
        fig.savefig(path)
        plt.close(fig)


def plot_history(history: list[dict], path) -> None:
    epochs = [h["epoch"] for h in history]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(epochs, [h["loss"] for h in history], color="tab:blue", label="loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("cross-entropy")
        if history and "train_oa" in history[0]:
            ax2 = ax.twinx()
            ax2.plot(epochs, [h["train_oa"] for h in history], color="tab:orange", label="train OA")
            ax2.set_ylabel("train OA")
            ax2.set_ylim(0, 1.02)
        fig.savefig(path)
        plt.close(fig)


def plot_cost_report(report, path) -> None:
    """Horizontal log-scale bars of per-layer MACs."""
    rows = [r for r in report.layers if r["kind"] == "mac"]
    names = [r["name"] for r in rows]
    vals = [r["analytic"] for r in rows]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(6, 0.22 * len(rows) + 1))
        y = np.arange(len(rows))
        colors = ["tab:red" if n.endswith(("spectral", "spatial")) else "tab:gray" for n in names]
        ax.barh(y, vals, color=colors)
        ax.set_yticks(y, names)
        ax.invert_yaxis()
        ax.set_xscale("log")
        ax.set_xlabel("multiply-accumulates (batch 1)")
        ax.set_title(f"full3d / factorized token-mixer ratio {report.ratio:.2f}")
        fig.savefig(path)
        plt.close(fig)
