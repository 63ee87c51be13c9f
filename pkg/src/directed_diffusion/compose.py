"""Scene compositing: per-step linear blending of the current latent with
recorded single-object trajectories, followed by conventional refinement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .backend import DiffusionBackend
from .errors import ValidationError
from .pipeline import DenoiseConfig, RunRecord, cfg_combine, new_run_id


@dataclass
class CompositeSpec:
    full_prompt: str
    sources: list[tuple[str, float]]  # (run_id, weight)
    edit_steps: int = 10

    def __post_init__(self):
        if not self.full_prompt:
            raise ValidationError("full_prompt must be non-empty")
        if not self.sources:
            raise ValidationError("at least one source run is required")
        for run_id, weight in self.sources:
            if not (0.0 <= weight <= 1.0):
                raise ValidationError(
                    f"source weight must lie in [0, 1], got {weight} for {run_id}"
                )
        if self.edit_steps < 0:
            raise ValidationError("edit_steps must be >= 0")

    def to_json(self) -> dict:
        return {
            "full_prompt": self.full_prompt,
            "sources": [
                {"run_id": run_id, "weight": weight} for run_id, weight in self.sources
            ],
            "edit_steps": self.edit_steps,
        }

    @classmethod
    def from_json(cls, data: dict) -> "CompositeSpec":
        try:
            return cls(
                full_prompt=data["full_prompt"],
                sources=[(s["run_id"], s.get("weight", 0.1)) for s in data["sources"]],
                edit_steps=data.get("edit_steps", 10),
            )
        except KeyError as exc:
            raise ValidationError(f"composite spec missing field {exc}") from exc


def composite_latents(
    z_t: torch.Tensor, sources: list[tuple[torch.Tensor, float]]
) -> torch.Tensor:
    """z <- (1/R) * sum_r [w_r * z + (1 - w_r) * z_r], evaluated literally."""
    if not sources:
        raise ValidationError("at least one source latent is required")
    for z_r, _ in sources:
        if z_r.shape != z_t.shape:
            raise ValidationError(
                f"source latent shape {tuple(z_r.shape)} != {tuple(z_t.shape)}"
            )
    terms = [w_r * z_t + (1.0 - w_r) * z_r for z_r, w_r in sources]
    return torch.stack(terms).sum(dim=0) / len(sources)


def run_scene_compositing(
    backend: DiffusionBackend,
    spec: CompositeSpec,
    source_records: list[RunRecord],
    config: DenoiseConfig,
    run_id: str | None = None,
) -> RunRecord:
    """Denoise under the full prompt, blending in the sources' recorded
    latents after each of the first `edit_steps` steps.
    """
    if len(source_records) != len(spec.sources):
        raise ValidationError("one loaded record per spec source is required")
    n_edit = spec.edit_steps
    if n_edit > config.total_steps:
        raise ValidationError("edit_steps exceeds total_steps")
    for record in source_records:
        if len(record.latents) != config.total_steps + 1:
            raise ValidationError(
                f"source {record.run_id} has {len(record.latents) - 1} steps, "
                f"need {config.total_steps}"
            )

    emb_cond = backend.encode_text(spec.full_prompt)
    emb_uncond = backend.encode_text("")
    backend.configure_schedule(config.total_steps)
    z = backend.sample_initial_latent(config.seed)
    latents = [z]
    final_maps = None

    weights = [w for _, w in spec.sources]
    with torch.no_grad():
        for i in range(config.total_steps):
            noise_cond, noise_uncond, maps = backend.denoise_step(
                z, emb_cond, emb_uncond, i, None
            )
            z = backend.scheduler_advance(
                z, cfg_combine(noise_uncond, noise_cond, config.guidance_scale), i
            )
            if i < n_edit:
                z = composite_latents(
                    z,
                    [
                        (record.latents[i + 1], w)
                        for record, w in zip(source_records, weights)
                    ],
                )
            latents.append(z)
            final_maps = maps.detach_clone()

    record = RunRecord(
        run_id=run_id or new_run_id("compose"),
        kind="compose",
        config=config,
        prompt=spec.full_prompt,
        directives=[],
        latents=latents,
        final_attention=final_maps,
        loss_trace=[],
        image=backend.decode(z),
        sources=[run_id_ for run_id_, _ in spec.sources],
    )
    record.validate()
    return record
