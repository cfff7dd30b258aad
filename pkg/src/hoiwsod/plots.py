"""Figures written to files: attention overlays, loss curves, ablation charts."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

from .annotations import BoundingBox  # noqa: E402


def _box_patch(box: BoundingBox, color: str, style: str = "-") -> Rectangle:
    return Rectangle((box.x_min, box.y_min), box.width, box.height, fill=False,
                     edgecolor=color, linewidth=1.5, linestyle=style)


def attention_overlays(panels: Sequence[dict], path: str | Path, cols: int = 4) -> Path:
    """One panel per tuple: image, attention map stretched over it, truth and pseudo boxes.

    Each panel dict holds ``image`` (HxWx3 uint8), ``attention`` (grid array),
    ``title`` and optional ``truth`` / ``pseudo`` boxes.
    """
    if not panels:
        raise ValueError("nothing to plot")
    rows = math.ceil(len(panels) / cols)
    fig, axes = plt.subplots(rows, cols, figsize=(3 * cols, 3 * rows), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for ax, p in zip(axes.ravel(), panels):
        h, w = p["image"].shape[:2]
        ax.imshow(p["image"])
        ax.imshow(p["attention"], cmap="jet", alpha=0.45, vmin=0, vmax=1,
                  extent=(0, w, h, 0), interpolation="nearest")
        if p.get("truth") is not None:
            ax.add_patch(_box_patch(p["truth"], "lime"))
        if p.get("pseudo") is not None:
            ax.add_patch(_box_patch(p["pseudo"], "white", "--"))
        ax.set_title(p.get("title", ""), fontsize=8)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def loss_curves(traces: dict[str, list[dict]], path: str | Path) -> Optional[Path]:
    """Per-epoch losses of every training phase found in ``traces``."""
    traces = {k: v for k, v in traces.items() if v}
    if not traces:
        return None
    fig, axes = plt.subplots(1, len(traces), figsize=(4 * len(traces), 3), squeeze=False)
    for ax, (name, trace) in zip(axes[0], sorted(traces.items())):
        epochs = [t["epoch"] for t in trace]
        for key in ("l_cls", "l_loc", "l_att"):
            if key in trace[0]:
                ax.plot(epochs, [t[key] for t in trace], marker="o", label=key)
        ax.set_title(name)
        ax.set_xlabel("epoch")
        ax.set_yscale("log")
        ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def ablation_chart(rows: Sequence[dict], path: str | Path,
                   metrics: Sequence[str] = ("recall_target_train", "recall_target_test",
                                             "map_target_weak")) -> Path:
    """Grouped bars of selected metrics per grid cell; failed cells show as gaps."""
    cells = [r["cell"] for r in rows]
    x = np.arange(len(cells))
    width = 0.8 / len(metrics)
    fig, ax = plt.subplots(figsize=(max(5.0, 1.2 * len(cells) + 2), 3.5))
    for k, m in enumerate(metrics):
        vals = [r.get(m, np.nan) for r in rows]
        ax.bar(x + (k - (len(metrics) - 1) / 2) * width, vals, width, label=m)
    ax.set_xticks(x)
    ax.set_xticklabels(cells, rotation=30, ha="right", fontsize=8)
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
