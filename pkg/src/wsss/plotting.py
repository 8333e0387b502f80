"""Report figures written next to the JSON/TSV outputs."""

import matplotlib as mpl

mpl.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402

from .data import CLASS_NAMES  # noqa: E402
from .export import PALETTE  # noqa: E402
from .metrics import TABLE_NAMES  # noqa: E402

mpl.rcParams.update({"font.size": 9, "axes.spines.top": False, "axes.spines.right": False})

LABEL_CMAP = ListedColormap(PALETTE / 255.0)


def _save(fig, path, dpi=120):
    fig.tight_layout()
    fig.savefig(path, dpi=dpi)
    plt.close(fig)


def false_color(image):
    """NIR/R/G composite of a 4-band tile, stretched to [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    rgb = np.stack([img[3], img[0], img[1]], axis=-1) if img.shape[0] >= 4 else img[:3].transpose(1, 2, 0)
    lo, hi = np.percentile(rgb, [1, 99])
    return np.clip((rgb - lo) / max(hi - lo, 1e-12), 0, 1)


def plot_comparison(reports, path):
    """Bar charts of macro F1, parameter count and segmentation time per method."""
    names = [TABLE_NAMES.get(r.method, r.method) for r in reports]
    x = np.arange(len(reports))
    fig, axes = plt.subplots(1, 3, figsize=(9, 2.8))
    axes[0].bar(x, [100 * r.f1_macro for r in reports], color="0.4")
    axes[0].set_ylabel("F1 (%)")
    axes[1].bar(x, [r.params for r in reports], color="0.6")
    axes[1].set_ylabel("# Param")
    axes[2].bar(x, [r.seg_time_ms_mean for r in reports],
                yerr=[r.seg_time_ms_std for r in reports], color="0.25", capsize=3)
    axes[2].set_ylabel("Seg. time (ms / image)")
    for ax in axes:
        ax.set_xticks(x)
        ax.set_xticklabels(names)
    _save(fig, path)


def plot_panel(samples, label_maps, path, max_rows=4):
    """Image, reference and one segmentation per method for the first samples.

    ``label_maps`` maps a method name to a list of label maps aligned with
    ``samples``.
    """
    methods = list(label_maps)
    rows = min(max_rows, len(samples))
    if rows == 0:
        return
    cols = 2 + len(methods)
    fig, axes = plt.subplots(rows, cols, figsize=(1.6 * cols, 1.6 * rows), squeeze=False)
    n = len(PALETTE)
    for i in range(rows):
        s = samples[i]
        axes[i, 0].imshow(false_color(s.image))
        if s.reference is not None:
            axes[i, 1].imshow(s.reference, cmap=LABEL_CMAP, vmin=-0.5, vmax=n - 0.5,
                              interpolation="nearest")
        for j, m in enumerate(methods):
            axes[i, 2 + j].imshow(label_maps[m][i], cmap=LABEL_CMAP, vmin=-0.5, vmax=n - 0.5,
                                  interpolation="nearest")
    titles = ["Image", "Reference"] + [TABLE_NAMES.get(m, m) for m in methods]
    for j, t in enumerate(titles):
        axes[0, j].set_title(t)
    for ax in axes.ravel():
        ax.set_xticks([])
        ax.set_yticks([])
    handles = [plt.Rectangle((0, 0), 1, 1, color=PALETTE[k] / 255.0) for k in range(n)]
    fig.legend(handles, CLASS_NAMES[:n], loc="lower center", ncol=n, frameon=False)
    fig.tight_layout(rect=(0, 0.06, 1, 1))
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_heatmaps(heatmaps, path, class_names=CLASS_NAMES):
    classes = list(heatmaps.classes) or list(range(heatmaps.n_classes))
    fig, axes = plt.subplots(1, len(classes), figsize=(1.8 * len(classes), 2.0), squeeze=False)
    for ax, s in zip(axes[0], classes):
        ax.imshow(heatmaps.maps[s], cmap="viridis", vmin=0, vmax=1)
        ax.set_title(class_names[s] if s < len(class_names) else str(s))
        ax.set_xticks([])
        ax.set_yticks([])
    _save(fig, path)


def plot_seed_sweep(result, path):
    es = sorted(result["f1"])
    f1 = [100 * result["f1"][e] for e in es]
    fig, ax = plt.subplots(figsize=(3.6, 2.6))
    ax.plot(es, f1, marker="o", color="0.2")
    ax.axvline(result["best"], ls="--", color="0.6")
    ax.set_xlabel("seeds E")
    ax.set_ylabel("SEM F1 (%)")
    _save(fig, path)


def plot_training(loss_history, val_f1_history, path):
    fig, ax = plt.subplots(figsize=(4, 2.6))
    epochs = np.arange(1, len(loss_history) + 1)
    ax.plot(epochs, loss_history, color="0.2", label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("BCE")
    if val_f1_history:
        ax2 = ax.twinx()
        ax2.plot(epochs, val_f1_history, color="tab:green", label="val F1")
        ax2.set_ylabel("image-level F1")
        ax2.set_ylim(0, 1.02)
    _save(fig, path)
