"""Batch experimentation and diagnostics: seed sweeps, the direct-injection
ablation grid, gradient-norm traces, and the attention-mass / IOU metrics.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch

from .attention import CrossAttentionMaps
from .backend import DiffusionBackend
from .errors import UndefinedMetricError, ValidationError
from .pipeline import (
    DenoiseConfig,
    RunRecord,
    run_direct_injection,
    run_directed_diffusion,
)
from .regions import BoundingBox, RegionDirective, rasterize_box
from .store import RunStore


@dataclass
class BatchResult:
    """One cell of a batch: either a completed run or the failure detail."""

    seed: int
    run_id: str | None
    error: str | None = None


def run_ssk(
    backend: DiffusionBackend,
    prompt: str,
    directives: list[RegionDirective],
    k: int,
    seed0: int,
    config: DenoiseConfig,
    store: RunStore | None = None,
) -> list[BatchResult]:
    """Generate k runs with consecutive seeds seed0 .. seed0+k-1.

    Best-of-k selection is left to a human; the harness only generates and
    indexes. Individual failures are recorded and the batch continues.
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    results = []
    for seed in range(seed0, seed0 + k):
        cell_config = replace(config, seed=seed)
        try:
            record = run_directed_diffusion(backend, prompt, directives, cell_config)
            if store is not None:
                store.save(record)
            results.append(BatchResult(seed=seed, run_id=record.run_id))
        except Exception as exc:  # per-run failure must not kill the batch
            results.append(BatchResult(seed=seed, run_id=None, error=str(exc)))
    return results


def gradient_norm_trace(record: RunRecord) -> np.ndarray:
    """Discrete-time proxy for the latent rate of change: the L2 norm of each
    step's latent difference. Length equals total_steps.
    """
    record.validate()
    diffs = [
        float(torch.linalg.vector_norm(b - a))
        for a, b in zip(record.latents[:-1], record.latents[1:])
    ]
    return np.array(diffs)


def attention_mass_metric(maps: CrossAttentionMaps, directive: RegionDirective) -> float:
    """Fraction of the directed tokens' attention mass inside the box,
    averaged over heads and the latent-resolution layer tier.
    """
    directive.validate_against_prompt(maps.prompt_length)
    best = max(maps.resolution(layer_id) for layer_id in maps.layers)
    layer_ids = [l for l in maps.layers if maps.resolution(l) == best]

    inside_total = 0.0
    total = 0.0
    for layer_id in layer_ids:
        n = maps.resolution(layer_id)
        inside = torch.from_numpy(rasterize_box(directive.box, n)).reshape(-1)
        avg = maps.head_mean(layer_id)  # (n*n, 77)
        for i in directive.token_indices:
            column = avg[:, i - 1]
            inside_total += float(column[inside].sum())
            total += float(column.sum())
    if total <= 0.0:
        raise UndefinedMetricError("directed tokens carry zero attention mass")
    return inside_total / total


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union in fractional coordinates."""
    ix = max(0.0, min(a.right, b.right) - max(a.left, b.left))
    iy = max(0.0, min(a.bottom, b.bottom) - max(a.top, b.top))
    inter = ix * iy
    union = a.width * a.height + b.width * b.height - inter
    return inter / union


@dataclass
class AblationCell:
    num_trailing: int
    edit_steps: int
    run_id: str | None
    error: str | None = None


DEFAULT_ABLATION_TRAILING = (5, 10, 15, 20)
DEFAULT_ABLATION_STEPS = (1, 3, 5, 10, 15)


def ablation_grid(
    backend: DiffusionBackend,
    prompt: str,
    directive: RegionDirective,
    m_values=DEFAULT_ABLATION_TRAILING,
    n_values=DEFAULT_ABLATION_STEPS,
    config: DenoiseConfig | None = None,
    store: RunStore | None = None,
) -> list[list[AblationCell]]:
    """Direct-injection runs over num-trailing-maps x num-edit-steps, one row
    per m value, sharing the config seed. Per-cell failures are recorded.
    """
    config = config or DenoiseConfig()
    for n in n_values:
        if n > config.total_steps:
            raise ValidationError(f"edit step count {n} exceeds total_steps")
    grid: list[list[AblationCell]] = []
    for m in m_values:
        row = []
        for n in n_values:
            cell_config = replace(config, edit_steps=n)
            try:
                record = run_direct_injection(
                    backend, prompt, [directive], m, cell_config
                )
                if store is not None:
                    store.save(record)
                row.append(AblationCell(m, n, record.run_id))
            except Exception as exc:
                row.append(AblationCell(m, n, None, error=str(exc)))
        grid.append(row)
    return grid
