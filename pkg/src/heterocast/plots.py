"""Matplotlib figure rendering for the report paths.

Every figure is written as a standalone SVG next to the delimited data it
illustrates; nothing here is interactive.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_line_plot(
    path: str | Path,
    x: np.ndarray,
    series: dict[str, np.ndarray],
    title: str,
    xlabel: str = "step",
    ylabel: str = "value",
) -> Path:
    fig, ax = plt.subplots(figsize=(8, 3.5))
    for label, values in series.items():
        ax.plot(x, values, label=label, linewidth=1.0)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return Path(path)


def save_heatmap(
    path: str | Path,
    matrix: np.ndarray,
    title: str,
    xlabel: str = "",
    ylabel: str = "",
) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(matrix, aspect="auto", cmap="viridis")
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return Path(path)


def save_bar_chart(
    path: str | Path,
    labels: list[str],
    values: np.ndarray,
    title: str,
    ylabel: str,
) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(range(len(labels)), values, color="steelblue")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_title(title)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return Path(path)


def save_loss_curve(path: str | Path, train_loss: list[float],
                    val_mae: list[float]) -> Path:
    epochs = np.arange(1, len(train_loss) + 1)
    return save_line_plot(
        path,
        epochs,
        {"train loss": np.asarray(train_loss), "val MAE": np.asarray(val_mae)},
        title="training history",
        xlabel="epoch",
        ylabel="raw-unit error",
    )
