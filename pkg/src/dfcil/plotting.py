"""Figures written next to the delimited report tables."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _finish(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_omega_curves(curves: Mapping[str, Sequence[Sequence[float]]], path, title: str = "") -> Path:
    """One line per method: mean running Omega after each task, shaded by trial std."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, trials in curves.items():
        arr = 100 * np.asarray(trials, dtype=float)
        mean, std = arr.mean(0), arr.std(0)
        t = np.arange(1, arr.shape[1] + 1)
        ax.plot(t, mean, marker="o", label=label)
        ax.fill_between(t, mean - std, mean + std, alpha=0.2)
    ax.set_xlabel("task")
    ax.set_ylabel(r"$\Omega$ up to task (%)")
    ax.set_xticks(np.arange(1, max(len(v[0]) for v in curves.values()) + 1))
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _finish(fig, path)


def plot_accuracy_matrix(cumulative: Sequence[Sequence[float]], path, title: str = "") -> Path:
    n = len(cumulative)
    grid = np.full((n, n), np.nan)
    for i, row in enumerate(cumulative):
        grid[i, :len(row)] = row
    fig, ax = plt.subplots(figsize=(4, 3.5))
    im = ax.imshow(100 * grid, vmin=0, vmax=100, cmap="viridis")
    ax.set_xlabel("classes of tasks 1..n")
    ax.set_ylabel("after task i")
    ax.set_xticks(range(n), [str(k + 1) for k in range(n)])
    ax.set_yticks(range(n), [str(k + 1) for k in range(n)])
    fig.colorbar(im, ax=ax, label="accuracy (%)")
    if title:
        ax.set_title(title)
    return _finish(fig, path)


def plot_drift(report: Mapping[str, float], path, title: str = "") -> Path:
    """Paired bars: real-vs-synthetic and real-vs-next-task distances for MID and MMD."""
    fig, axes = plt.subplots(1, 2, figsize=(6, 3))
    for ax, key, name in ((axes[0], "mid", "MID"), (axes[1], "mmd", "MMD$^2$")):
        vals = [report[f"{key}_real_synth"], report[f"{key}_real_real"]]
        ax.bar(["real1 / synth1", "real1 / real2"], vals, color=["tab:blue", "tab:red"])
        ax.set_title(name)
    if title:
        fig.suptitle(title)
    return _finish(fig, path)
