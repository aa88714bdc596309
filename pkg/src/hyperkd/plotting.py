"""Report figures rendered with the Agg backend straight to files."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

STYLE = {"figsize": (5.0, 3.2), "dpi": 120}


def _figure():
    fig = Figure(figsize=STYLE["figsize"], dpi=STYLE["dpi"])
    FigureCanvasAgg(fig)
    return fig, fig.add_subplot(1, 1, 1)


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path)
    return path


def loss_curves(runlog, path) -> Path:
    """Per-step loss components on a log scale."""
    fig, ax = _figure()
    steps = runlog.column("step")
    for name in ("l_total", "l_mse", "l_ssim", "l_kd"):
        values = runlog.column(name)
        if np.any(values > 0):
            ax.plot(steps, np.maximum(values, 1e-12), label=name, lw=1.0)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(frameon=False, fontsize=7)
    return _save(fig, path)


def score_heatmap(scores, path, mask=None) -> Path:
    """Patch significance grid; masked patches outlined."""
    fig, ax = _figure()
    grid = scores.scores.reshape(scores.grid)
    im = ax.imshow(grid, cmap="viridis", interpolation="nearest")
    fig.colorbar(im, ax=ax, label="score")
    if mask is not None:
        gw = scores.grid[1]
        for i in mask.masked_ids:
            r, c = divmod(int(i), gw)
            ax.add_patch(_rect(c - 0.5, r - 0.5))
    ax.set_xlabel("patch column")
    ax.set_ylabel("patch row")
    return _save(fig, path)


def _rect(x, y):
    from matplotlib.patches import Rectangle
    return Rectangle((x, y), 1, 1, fill=False, edgecolor="white", lw=1.0)


def channel_psnr(psnr_means, path) -> Path:
    fig, ax = _figure()
    ax.plot(np.arange(len(psnr_means)), psnr_means, marker=".", lw=1.0)
    ax.set_xlabel("band index")
    ax.set_ylabel("PSNR [dB]")
    return _save(fig, path)


def class_bars(result, path) -> Path:
    """Per-class pixel top-1 and IoU side by side."""
    fig, ax = _figure()
    k = np.arange(len(result.per_class_top1))
    ax.bar(k - 0.2, np.nan_to_num(result.per_class_top1), 0.4, label="top-1")
    ax.bar(k + 0.2, np.nan_to_num(result.iou), 0.4, label="IoU")
    ax.set_xticks(k)
    ax.set_xlabel("class")
    ax.set_ylim(0, 1)
    ax.legend(frameon=False, fontsize=7)
    return _save(fig, path)
