"""Figures for the CLI report paths. Everything renders off-screen to files."""
from __future__ import annotations

import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

GOLDEN = (5 ** 0.5 - 1) / 2


def _figure(width: float = 6.0, height: float | None = None, ncols: int = 1):
    fig, axes = plt.subplots(1, ncols, figsize=(width, height or width * GOLDEN))
    for ax in np.atleast_1d(axes):
        ax.spines["right"].set_visible(False)
        ax.spines["top"].set_visible(False)
    return fig, axes


def _save(fig, path: str | os.PathLike) -> str:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def flops_figure(reports: Sequence, path: str | os.PathLike, reference: dict[int, float] | None = None) -> str:
    """Left: total GFLOPs against view count (plus optional reference points).
    Right: per-module breakdown of each report as stacked bars."""
    reports = sorted(reports, key=lambda r: r.n_views)
    views = [r.n_views for r in reports]
    fig, (ax0, ax1) = _figure(10.0, 4.0, ncols=2)
    ax0.plot(views, [r.total / 1e9 for r in reports], "o-", label="traced")
    if reference:
        ks = sorted(reference)
        ax0.plot(ks, [reference[k] for k in ks], "s--", color="gray", label="reference")
    ax0.set_xlabel("views (center included)")
    ax0.set_ylabel("GFLOPs")
    ax0.legend(frameon=False)

    modules = sorted({m for r in reports for m in r.by_module()})
    bottom = np.zeros(len(reports))
    x = np.arange(len(reports))
    for m in modules:
        vals = np.array([r.by_module().get(m, 0) / 1e9 for r in reports])
        ax1.bar(x, vals, bottom=bottom, label=m)
        bottom += vals
    ax1.set_xticks(x, [str(v) for v in views])
    ax1.set_xlabel("views")
    ax1.set_ylabel("GFLOPs")
    ax1.legend(frameon=False, fontsize=8)
    return _save(fig, path)


def loss_figure(steps: Sequence[int], losses: Sequence[float], lrs: Sequence[float],
                path: str | os.PathLike) -> str:
    fig, ax = _figure()
    ax.plot(steps, losses, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax2 = ax.twinx()
    ax2.plot(steps, lrs, color="tab:orange", lw=1, alpha=0.7)
    ax2.set_ylabel("learning rate", color="tab:orange")
    return _save(fig, path)


def confusion_figure(confusion: np.ndarray, path: str | os.PathLike) -> str:
    conf = np.asarray(confusion, dtype=float)
    rows = conf.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        norm = np.where(rows > 0, conf / rows, 0.0)
    k = conf.shape[0]
    fig, ax = _figure(4.5, 4.0)
    im = ax.imshow(norm, vmin=0, vmax=1, cmap="viridis")
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_xticks(range(k))
    ax.set_yticks(range(k))
    for i in range(k):
        for j in range(k):
            ax.text(j, i, f"{int(conf[i, j])}", ha="center", va="center", fontsize=7,
                    color="w" if norm[i, j] < 0.5 else "k")
    fig.colorbar(im, ax=ax, fraction=0.046)
    return _save(fig, path)
