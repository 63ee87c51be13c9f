"""The two-stage denoising loop: N attention-editing steps, then conventional
classifier-free-guided denoising. Records the full trajectory for compositing
and placement finetuning.
"""

from __future__ import annotations

import uuid
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .attention import (
    CrossAttentionMaps,
    OptConfig,
    build_target_maps,
    direct_injection_ablation,
    optimize_trailing_weights,
    substitution_interceptor,
)
from .backend import DiffusionBackend
from .errors import ValidationError
from .regions import RegionDirective


@dataclass
class DenoiseConfig:
    total_steps: int = 50
    edit_steps: int = 10
    guidance_scale: float = 7.5
    seed: int = 0
    weaken_c: float = 0.1
    gaussian_amplitude: float = 1.0
    opt: OptConfig = field(default_factory=OptConfig)

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValidationError("total_steps must be >= 1")
        if not (0 <= self.edit_steps <= self.total_steps):
            raise ValidationError(
                f"edit_steps must lie in [0, total_steps], got {self.edit_steps}"
            )
        if self.guidance_scale < 0:
            raise ValidationError("guidance_scale must be >= 0")
        if self.seed < 0:
            raise ValidationError("seed must be >= 0")
        if not (0.0 <= self.weaken_c <= 1.0):
            raise ValidationError("weaken_c must lie in [0, 1]")
        if self.gaussian_amplitude < 0:
            raise ValidationError("gaussian_amplitude must be >= 0")

    def to_json(self) -> dict:
        return {
            "total_steps": self.total_steps,
            "edit_steps": self.edit_steps,
            "guidance_scale": self.guidance_scale,
            "seed": self.seed,
            "weaken_c": self.weaken_c,
            "gaussian_amplitude": self.gaussian_amplitude,
            "opt": {
                "iterations": self.opt.iterations,
                "learning_rate": self.opt.learning_rate,
                "init_range": self.opt.init_range,
                "warm_start": self.opt.warm_start,
            },
        }

    @classmethod
    def from_json(cls, data: dict) -> "DenoiseConfig":
        opt = data.get("opt", {})
        return cls(
            total_steps=data.get("total_steps", 50),
            edit_steps=data.get("edit_steps", 10),
            guidance_scale=data.get("guidance_scale", 7.5),
            seed=data.get("seed", 0),
            weaken_c=data.get("weaken_c", 0.1),
            gaussian_amplitude=data.get("gaussian_amplitude", 1.0),
            opt=OptConfig(
                iterations=opt.get("iterations", 5),
                learning_rate=opt.get("learning_rate", 5e-4),
                init_range=opt.get("init_range", 0.15),
                warm_start=opt.get("warm_start", True),
            ),
        )


@dataclass
class RunRecord:
    run_id: str
    kind: str  # generate | direct | compose | pf
    config: DenoiseConfig
    prompt: str
    directives: list[RegionDirective]
    latents: list[torch.Tensor]
    final_attention: CrossAttentionMaps | None
    loss_trace: list[list[dict]]  # per edited step: [{"step","iter","loss"}]
    image: np.ndarray | None
    sources: list[str] = field(default_factory=list)
    error: str | None = None

    def validate(self) -> None:
        if len(self.latents) != self.config.total_steps + 1:
            raise ValidationError(
                f"trajectory length {len(self.latents)} != total_steps + 1"
            )
        shapes = {tuple(z.shape) for z in self.latents}
        if len(shapes) > 1:
            raise ValidationError(f"latents have mixed shapes: {shapes}")

    def manifest(self) -> dict:
        return {
            "run_id": self.run_id,
            "kind": self.kind,
            "config": self.config.to_json(),
            "prompt": self.prompt,
            "directives": [d.to_json() for d in self.directives],
            "sources": list(self.sources),
            "error": self.error,
        }


def new_run_id(kind: str) -> str:
    return f"{kind}-{uuid.uuid4().hex[:12]}"


def cfg_combine(
    noise_uncond: torch.Tensor, noise_cond: torch.Tensor, guidance_scale: float
) -> torch.Tensor:
    """Standard classifier-free guidance: uncond + w * (cond - uncond)."""
    if noise_uncond.shape != noise_cond.shape:
        raise ValidationError(
            f"operand shape mismatch: {tuple(noise_uncond.shape)} vs {tuple(noise_cond.shape)}"
        )
    return noise_uncond + guidance_scale * (noise_cond - noise_uncond)


def plain_sample(
    backend: DiffusionBackend, prompt: str, config: DenoiseConfig
) -> list[torch.Tensor]:
    """Conventional CFG sampling with no editing; the stage-boundary oracle."""
    emb_cond = backend.encode_text(prompt)
    emb_uncond = backend.encode_text("")
    backend.configure_schedule(config.total_steps)
    z = backend.sample_initial_latent(config.seed)
    latents = [z]
    with torch.no_grad():
        for i in range(config.total_steps):
            noise_cond, noise_uncond, _ = backend.denoise_step(
                z, emb_cond, emb_uncond, i, None
            )
            z = backend.scheduler_advance(
                z, cfg_combine(noise_uncond, noise_cond, config.guidance_scale), i
            )
            latents.append(z)
    return latents


def run_directed_diffusion(
    backend: DiffusionBackend,
    prompt: str,
    directives: list[RegionDirective],
    config: DenoiseConfig,
    run_id: str | None = None,
) -> RunRecord:
    """Full directed-diffusion run, editing the first `edit_steps` steps."""
    if not prompt:
        raise ValidationError("prompt must be non-empty")
    emb_cond = backend.encode_text(prompt)
    emb_uncond = backend.encode_text("")
    for d in directives:
        d.validate_against_prompt(emb_cond.prompt_length)
    if config.edit_steps > 0 and not directives:
        raise ValidationError("editing requires at least one directive")

    backend.configure_schedule(config.total_steps)
    z = backend.sample_initial_latent(config.seed)
    latents = [z]
    loss_trace: list[list[dict]] = []
    final_maps: CrossAttentionMaps | None = None
    warm: torch.Tensor | None = None

    for i in range(config.total_steps):
        if i < config.edit_steps:
            # capture raw maps, build targets, fit the trailing weights
            _, noise_uncond, maps = backend.denoise_step(z, emb_cond, emb_uncond, i, None)
            targets = build_target_maps(
                maps.detach_clone(), directives, config.weaken_c, config.gaussian_amplitude
            )
            weights = optimize_trailing_weights(
                backend,
                z,
                emb_cond,
                directives,
                targets,
                config.opt,
                step_index=i,
                total_steps=config.total_steps,
                guidance_scale=config.guidance_scale,
                uncond_embedding=emb_uncond,
                init_weights=warm if config.opt.warm_start else None,
                seed=config.seed * 10_000 + i,
            )
            warm = weights.weights
            loss_trace.append(weights.history_json(i))

            interceptor = substitution_interceptor(weights.weights.detach(), targets)
            noise_cond, noise_uncond, maps = backend.denoise_step(
                z, emb_cond, emb_uncond, i, interceptor
            )
            noise_cond = noise_cond.detach()
        else:
            with torch.no_grad():
                noise_cond, noise_uncond, maps = backend.denoise_step(
                    z, emb_cond, emb_uncond, i, None
                )
        z = backend.scheduler_advance(
            z, cfg_combine(noise_uncond, noise_cond, config.guidance_scale), i
        ).detach()
        latents.append(z)
        final_maps = maps.detach_clone()

    record = RunRecord(
        run_id=run_id or new_run_id("generate"),
        kind="generate",
        config=config,
        prompt=prompt,
        directives=list(directives),
        latents=latents,
        final_attention=final_maps,
        loss_trace=loss_trace,
        image=backend.decode(z),
    )
    record.validate()
    return record


def run_direct_injection(
    backend: DiffusionBackend,
    prompt: str,
    directives: list[RegionDirective],
    num_trailing: int,
    config: DenoiseConfig,
    run_id: str | None = None,
) -> RunRecord:
    """Ablation run: per edited step, directly inject the mask edits into the
    directed slots and the first `num_trailing` trailing slots, skipping the
    weight optimization entirely.
    """
    if not prompt:
        raise ValidationError("prompt must be non-empty")
    emb_cond = backend.encode_text(prompt)
    emb_uncond = backend.encode_text("")
    for d in directives:
        d.validate_against_prompt(emb_cond.prompt_length)

    def interceptor(layer_id: str, raw: torch.Tensor) -> torch.Tensor:
        maps = CrossAttentionMaps(
            layers={layer_id: raw}, prompt_length=emb_cond.prompt_length
        )
        edited = direct_injection_ablation(
            maps, directives, num_trailing, config.weaken_c, config.gaussian_amplitude
        )
        return edited.layers[layer_id]

    backend.configure_schedule(config.total_steps)
    z = backend.sample_initial_latent(config.seed)
    latents = [z]
    final_maps = None
    with torch.no_grad():
        for i in range(config.total_steps):
            hook = interceptor if i < config.edit_steps and directives else None
            noise_cond, noise_uncond, maps = backend.denoise_step(
                z, emb_cond, emb_uncond, i, hook
            )
            z = backend.scheduler_advance(
                z, cfg_combine(noise_uncond, noise_cond, config.guidance_scale), i
            )
            latents.append(z)
            final_maps = maps.detach_clone()

    record = RunRecord(
        run_id=run_id or new_run_id("direct"),
        kind="direct",
        config=config,
        prompt=prompt,
        directives=list(directives),
        latents=latents,
        final_attention=final_maps,
        loss_trace=[],
        image=backend.decode(z),
    )
    record.validate()
    return record
