"""Static figures regenerated from metric CSVs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .trainer import RunSummary  # noqa: E402

PHASE_TITLES = {"train": "Training", "eval": "Evaluation"}


def _band(ax, phase, label=None, color=None):
    if phase.steps.size == 0:
        return
    line, = ax.plot(phase.steps, phase.mean, label=label, color=color, lw=1.5)
    ax.fill_between(phase.steps, phase.min, phase.max, color=line.get_color(), alpha=0.2, lw=0)


def plot_run(summary: RunSummary, path: str | Path, title: str = "") -> None:
    """Training and evaluation curves side by side: mean line, min/max band."""
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.6))
    for ax, name in zip(axes, ("train", "eval")):
        _band(ax, summary.phases[name])
        ax.set_title(f"{title} {PHASE_TITLES[name]}".strip())
        ax.set_xlabel("environment steps")
        ax.set_ylabel("return (smoothed)")
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def common_grid(summaries: dict, phase: str) -> np.ndarray:
    steps = [s.phases[phase].steps for s in summaries.values() if s.phases[phase].steps.size]
    return np.unique(np.concatenate(steps)) if steps else np.zeros(0, dtype=np.int64)


def overlay_table(summaries: dict, phase: str) -> tuple[np.ndarray, dict]:
    """Mean curves of several runs carried onto one shared step grid."""
    from .trainer import align_last_value

    grid = common_grid(summaries, phase)
    cols = {}
    for label, s in summaries.items():
        p = s.phases[phase]
        cols[label] = align_last_value(p.steps, p.mean, grid) if p.steps.size else np.full(grid.shape, np.nan)
    return grid, cols


def plot_overlay(summaries: dict, path: str | Path, title: str = "") -> None:
    """One row of train/eval panels with one mean curve per run label."""
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.6))
    _overlay_row(axes, summaries, title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _overlay_row(axes, summaries, title):
    for ax, name in zip(axes, ("train", "eval")):
        for label, s in summaries.items():
            _band(ax, s.phases[name], label=label)
        ax.set_title(f"{title} {PHASE_TITLES[name]}".strip())
        ax.set_xlabel("environment steps")
        ax.set_ylabel("return (smoothed)")
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)


def plot_sweep_grid(rows: dict, path: str | Path) -> None:
    """Model kinds as rows, train/eval as columns."""
    fig, axes = plt.subplots(len(rows), 2, figsize=(10, 3.4 * len(rows)), squeeze=False)
    for ax_row, (model, summaries) in zip(axes, rows.items()):
        _overlay_row(ax_row, summaries, model)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
