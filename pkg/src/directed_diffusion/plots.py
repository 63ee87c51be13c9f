"""Figure rendering for diagnostics: gradient-norm traces, loss curves,
and contact sheets for seed batches and ablation grids.

All functions render to a file path with the non-interactive Agg backend so
they are safe from the CLI and the service worker thread alike.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import ValidationError
from .harness import AblationCell, BatchResult, gradient_norm_trace
from .pipeline import RunRecord


def render_gradient_norm_figure(
    records: Sequence[RunRecord], path: str | Path, edit_steps: int | None = None
) -> Path:
    """Plot per-step latent displacement norms for one or more runs.

    A vertical line marks the editing-stage boundary when ``edit_steps``
    is given, making the early rapid-decrease region visible.
    """
    if not records:
        raise ValidationError("at least one run record is required")
    path = Path(path)
    fig, ax = plt.subplots(figsize=(7, 4))
    for record in records:
        trace = gradient_norm_trace(record)
        ax.plot(range(len(trace)), trace, label=record.run_id)
    if edit_steps is not None and edit_steps > 0:
        ax.axvline(edit_steps - 0.5, color="gray", linestyle="--", linewidth=1)
    ax.set_xlabel("denoising step")
    ax.set_ylabel("latent step norm")
    ax.set_title("Latent displacement per denoising step")
    if len(records) <= 8:
        ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_loss_trace_figure(record: RunRecord, path: str | Path) -> Path:
    """Plot the per-iteration editing loss for each edited step of a run."""
    if not record.loss_trace:
        raise ValidationError("run has no editing loss trace")
    path = Path(path)
    fig, ax = plt.subplots(figsize=(7, 4))
    for entries in record.loss_trace:
        if not entries:
            continue
        step = entries[0]["step"]
        ax.plot(
            [e["iter"] for e in entries],
            [e["loss"] for e in entries],
            marker="o",
            markersize=3,
            label=f"step {step}",
        )
    ax.set_xlabel("optimizer iteration")
    ax.set_ylabel("editing loss")
    ax.set_title("Trailing-weight optimization loss per edited step")
    if len(record.loss_trace) <= 12:
        ax.legend(fontsize="x-small")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _image_or_placeholder(record: RunRecord | None) -> np.ndarray:
    if record is not None and record.image is not None:
        return record.image
    return np.full((64, 64, 3), 32, dtype=np.uint8)


def render_seed_contact_sheet(
    results: Sequence[BatchResult],
    records: dict[str, RunRecord],
    path: str | Path,
    columns: int = 4,
) -> Path:
    """Tile the images of a consecutive-seed batch in seed order."""
    if not results:
        raise ValidationError("empty batch")
    path = Path(path)
    rows = math.ceil(len(results) / columns)
    fig, axes = plt.subplots(rows, columns, figsize=(2.2 * columns, 2.4 * rows))
    axes = np.atleast_1d(axes).reshape(rows, columns)
    for ax in axes.flat:
        ax.axis("off")
    for idx, result in enumerate(results):
        ax = axes[idx // columns][idx % columns]
        record = records.get(result.run_id) if result.run_id else None
        ax.imshow(_image_or_placeholder(record))
        title = f"seed {result.seed}"
        if result.error:
            title += " (failed)"
        ax.set_title(title, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_ablation_contact_sheet(
    grid: Sequence[Sequence[AblationCell]] | Sequence[AblationCell],
    records: dict[str, RunRecord],
    path: str | Path,
) -> Path:
    """Tile ablation images on a trailing-count × editing-steps grid."""
    cells: list[AblationCell] = []
    for entry in grid:
        if isinstance(entry, AblationCell):
            cells.append(entry)
        else:
            cells.extend(entry)
    if not cells:
        raise ValidationError("empty grid")
    path = Path(path)
    m_values = sorted({c.num_trailing for c in cells})
    n_values = sorted({c.edit_steps for c in cells})
    fig, axes = plt.subplots(
        len(m_values),
        len(n_values),
        figsize=(2.2 * len(n_values), 2.4 * len(m_values)),
    )
    axes = np.atleast_1d(axes).reshape(len(m_values), len(n_values))
    by_key = {(c.num_trailing, c.edit_steps): c for c in cells}
    for i, m in enumerate(m_values):
        for j, n in enumerate(n_values):
            ax = axes[i][j]
            ax.set_xticks([])
            ax.set_yticks([])
            cell = by_key.get((m, n))
            record = records.get(cell.run_id) if cell and cell.run_id else None
            ax.imshow(_image_or_placeholder(record))
            if i == 0:
                ax.set_title(f"n={n}", fontsize=9)
            if j == 0:
                ax.set_ylabel(f"m={m}", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
