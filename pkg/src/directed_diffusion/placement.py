"""Placement finetuning: move a synthesized object to a new position while
preserving its identity, reusing a recorded run's latents and final attention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .attention import CrossAttentionMaps
from .backend import DiffusionBackend
from .errors import DegenerateMaskError, ValidationError
from .pipeline import DenoiseConfig, RunRecord, cfg_combine, new_run_id
from .regions import RegionDirective, rasterize_box


@dataclass(frozen=True)
class Translation:
    """Integer translation in latent pixels."""

    dx: int
    dy: int

    def validate_against(self, height: int, width: int) -> None:
        if abs(self.dx) >= width or abs(self.dy) >= height:
            raise ValidationError(
                f"translation ({self.dx}, {self.dy}) out of bounds for {width}x{height}"
            )

    @property
    def is_identity(self) -> bool:
        return self.dx == 0 and self.dy == 0


@dataclass
class ObjectMask:
    """Binary object mask at latent resolution, clipped to the directive box."""

    values: np.ndarray  # (n, n) of {0, 1}
    source_token_indices: tuple[int, ...]
    threshold: float

    def __post_init__(self):
        vals = np.asarray(self.values)
        if not np.isin(vals, (0, 1)).all():
            raise ValidationError("object mask must be strictly binary")
        self.values = vals.astype(np.float64)


def _latent_tier_layers(maps: CrossAttentionMaps) -> list[str]:
    best = max(maps.resolution(layer_id) for layer_id in maps.layers)
    return [l for l in maps.layers if maps.resolution(l) == best]


def extract_object_mask(
    final_attention: CrossAttentionMaps,
    directive: RegionDirective,
    threshold_fraction: float,
) -> ObjectMask:
    """Binarize the directive tokens' final attention at a fraction of the
    in-box peak; everything outside the rasterized box is zero.
    """
    if not (0.0 <= threshold_fraction <= 1.0):
        raise ValidationError("threshold fraction must lie in [0, 1]")
    directive.validate_against_prompt(final_attention.prompt_length)

    layer_ids = _latent_tier_layers(final_attention)
    n = final_attention.resolution(layer_ids[0])
    acc = np.zeros((n, n), dtype=np.float64)
    for layer_id in layer_ids:
        avg = final_attention.head_mean(layer_id)  # (n*n, 77)
        for i in directive.token_indices:
            acc += avg[:, i - 1].detach().numpy().reshape(n, n)
    acc /= len(layer_ids) * len(directive.token_indices)

    inside = rasterize_box(directive.box, n)
    peak = float(acc[inside].max())
    mask = inside & (acc >= threshold_fraction * peak)
    if not mask.any():
        raise DegenerateMaskError(
            f"threshold {threshold_fraction} empties the mask; lower it"
        )
    return ObjectMask(
        values=mask.astype(np.float64),
        source_token_indices=directive.token_indices,
        threshold=threshold_fraction,
    )


def cyclic_translate(grid, translation: Translation):
    """Wrap-around shift by (dx, dy); a pure permutation of the entries.

    Accepts numpy arrays or torch tensors; spatial dims are the last two.
    """
    if isinstance(grid, torch.Tensor):
        translation.validate_against(grid.shape[-2], grid.shape[-1])
        return torch.roll(grid, shifts=(translation.dy, translation.dx), dims=(-2, -1))
    arr = np.asarray(grid)
    translation.validate_against(arr.shape[-2], arr.shape[-1])
    return np.roll(arr, shift=(translation.dy, translation.dx), axis=(-2, -1))


def _broadcast(mask: np.ndarray, like: torch.Tensor) -> torch.Tensor:
    return torch.from_numpy(mask).to(like.dtype).expand_as(like)


def pf_initialize(
    source: RunRecord,
    mask: ObjectMask,
    translation: Translation,
    edit_steps: int,
    backend: DiffusionBackend | None = None,
    noise_seed: int = 0,
) -> torch.Tensor:
    """Build the initial placement-finetuned latent at step T-N.

    Three regions: background keeps z_{T-N}, the moved object takes
    X(z_{T-N}), and the exposed hole (under the object's old position, outside
    its new one) is filled from the wrapped initial noise X(z_T). When a
    backend is supplied, the hole additionally gets one on-schedule add-noise/
    denoise round-trip so the inpainted area develops distinct detail; the
    round-trip never touches pixels outside the hole.
    """
    n_latents = len(source.latents)
    if not (0 <= edit_steps < n_latents):
        raise ValidationError(f"edit_steps {edit_steps} outside recorded trajectory")
    z = source.latents[edit_steps]
    z_init = source.latents[0]

    m = mask.values
    xm = cyclic_translate(m, translation)
    hole = m * (1.0 - xm)
    background = (1.0 - m) * (1.0 - xm)

    moved = cyclic_translate(z, translation)
    wrapped_noise = cyclic_translate(z_init, translation)
    z_new = (
        z * _broadcast(background, z)
        + moved * _broadcast(xm, z)
        + wrapped_noise * _broadcast(hole, z)
    )

    if backend is not None and hole.any() and edit_steps > 0:
        z_rt = _noise_roundtrip(backend, source, z_new, edit_steps, noise_seed)
        z_new = z_new * _broadcast(1.0 - hole, z_new) + z_rt * _broadcast(hole, z_new)
    return z_new


def _noise_roundtrip(
    backend: DiffusionBackend,
    source: RunRecord,
    z: torch.Tensor,
    step_index: int,
    noise_seed: int,
) -> torch.Tensor:
    """Lift the latent one noise level and denoise it back on-schedule."""
    emb_cond = backend.encode_text(source.prompt)
    emb_uncond = backend.encode_text("")
    with torch.no_grad():
        noisy = backend.add_noise(z, step_index, noise_seed)
        noise_cond, noise_uncond, _ = backend.denoise_step(
            noisy, emb_cond, emb_uncond, step_index - 1, None
        )
        combined = cfg_combine(
            noise_uncond, noise_cond, source.config.guidance_scale
        )
        return backend.scheduler_advance(noisy, combined, step_index - 1, commit=False)


def pf_step_composite(
    z_new: torch.Tensor,
    z_source: torch.Tensor,
    mask: ObjectMask,
    translation: Translation,
) -> torch.Tensor:
    """z' <- z' * (1 - X(M)) + X(z_source) * X(M)."""
    if z_new.shape != z_source.shape:
        raise ValidationError(
            f"latent shape mismatch: {tuple(z_new.shape)} vs {tuple(z_source.shape)}"
        )
    xm = cyclic_translate(mask.values, translation)
    moved = cyclic_translate(z_source, translation)
    return z_new * _broadcast(1.0 - xm, z_new) + moved * _broadcast(xm, z_new)


def run_placement_finetune(
    backend: DiffusionBackend,
    source: RunRecord,
    directive: RegionDirective,
    translation: Translation,
    edit_steps: int = 10,
    threshold_fraction: float = 0.5,
    run_id: str | None = None,
) -> RunRecord:
    """Move the directed object by `translation` and re-denoise the remainder
    of the schedule, compositing the moved object from the recorded trajectory
    at every step.
    """
    if source.final_attention is None:
        raise ValidationError("source run has no recorded final attention")
    config = source.config
    total = config.total_steps
    if not (0 <= edit_steps < total + 1):
        raise ValidationError(f"edit_steps must lie in [0, {total}], got {edit_steps}")

    mask = extract_object_mask(source.final_attention, directive, threshold_fraction)
    translation.validate_against(*mask.values.shape)

    emb_cond = backend.encode_text(source.prompt)
    emb_uncond = backend.encode_text("")
    backend.configure_schedule(total)

    z = pf_initialize(
        source, mask, translation, edit_steps, backend=backend, noise_seed=config.seed
    )
    latents = list(source.latents[: edit_steps + 1])
    latents[edit_steps] = z
    final_maps = None
    with torch.no_grad():
        for i in range(edit_steps, total):
            noise_cond, noise_uncond, maps = backend.denoise_step(
                z, emb_cond, emb_uncond, i, None
            )
            z = backend.scheduler_advance(
                z, cfg_combine(noise_uncond, noise_cond, config.guidance_scale), i
            )
            z = pf_step_composite(z, source.latents[i + 1], mask, translation)
            latents.append(z)
            final_maps = maps.detach_clone()

    record = RunRecord(
        run_id=run_id or new_run_id("pf"),
        kind="pf",
        config=config,
        prompt=source.prompt,
        directives=[directive],
        latents=latents,
        final_attention=final_maps if final_maps is not None else source.final_attention,
        loss_trace=[],
        image=backend.decode(z),
        sources=[source.run_id],
    )
    record.validate()
    return record
