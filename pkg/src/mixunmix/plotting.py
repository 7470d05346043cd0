"""Matplotlib figures written straight to PNG files (Agg backend, no display)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from mixunmix.augment import make_layout, mix_tiles  # noqa: E402

# Without this, the PNG text chunk carries the matplotlib version and files
# would differ across installs.
_PNG_META = {"Software": None}


def _to_hwc(img: np.ndarray) -> np.ndarray:
    return np.clip(np.transpose(img, (1, 2, 0)), 0.0, 1.0)


def _draw_grid(ax, size: tuple[int, int], tiles_per_axis: int) -> None:
    h, w = size
    for k in range(1, tiles_per_axis):
        ax.axhline(k * h / tiles_per_axis - 0.5, color="white", lw=0.6, alpha=0.8)
        ax.axvline(k * w / tiles_per_axis - 0.5, color="white", lw=0.6, alpha=0.8)


def contact_sheet(path: str | Path, rows: Sequence[tuple[str, np.ndarray]],
                  tiles_per_axis: int | None = None, title: str | None = None) -> Path:
    """One row per ``(label, batch)``; batches are NCHW floats in [0, 1].

    When ``tiles_per_axis`` is given, tile boundaries are overlaid on every
    image so the mixed row can be read against the originals.
    """
    if not rows:
        raise ValueError("contact sheet needs at least one row")
    n = max(len(b) for _, b in rows)
    fig, axes = plt.subplots(len(rows), n, figsize=(1.6 * n, 1.7 * len(rows)), squeeze=False)
    for r, (label, batch) in enumerate(rows):
        for c in range(n):
            ax = axes[r][c]
            ax.set_xticks([])
            ax.set_yticks([])
            if c >= len(batch):
                ax.axis("off")
                continue
            ax.imshow(_to_hwc(batch[c]), interpolation="nearest")
            if tiles_per_axis:
                _draw_grid(ax, batch[c].shape[1:], tiles_per_axis)
        axes[r][0].set_ylabel(label, fontsize=9)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def mixed_batch_snapshot(path: str | Path, images: np.ndarray, cfg, step: int) -> Path:
    """Originals next to one freshly mixed version of the same batch.

    The masks come from their own seed stream so that drawing a snapshot
    never perturbs the training run.
    """
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(4, step)))
    layout = make_layout(rng, len(images), cfg.group_size, cfg.tiles_per_axis)
    mixed = mix_tiles(images, layout)
    return contact_sheet(path, [("original", images), ("mixed", mixed)],
                         cfg.tiles_per_axis, title=f"step {step + 1}")


def training_curves(path: str | Path, history: Sequence[dict],
                    label: str | None = None) -> Path:
    """Loss and AP50 panels from a metrics history (rows of ``HISTORY_FIELDS``)."""
    if not history:
        raise ValueError("history is empty")
    steps = [row["step"] for row in history]
    fig, (ax_loss, ax_ap) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax_loss.plot(steps, [row["l_s"] for row in history], marker="o", ms=3, label="supervised")
    ax_loss.plot(steps, [row["l_u"] for row in history], marker="o", ms=3, label="unsupervised")
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("mean loss since last eval")
    ax_loss.legend(fontsize=8)
    ax_ap.plot(steps, [row["AP50_teacher"] for row in history], marker="o", ms=3, label="teacher")
    ax_ap.plot(steps, [row["AP50_student"] for row in history], marker="o", ms=3, label="student")
    ax_ap.set_xlabel("step")
    ax_ap.set_ylabel("AP50 (held out)")
    ax_ap.set_ylim(0, 1)
    ax_ap.legend(fontsize=8)
    if label:
        fig.suptitle(label, fontsize=10)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path
