"""Cross-attention map editing: target maps, trailing-weight optimization,
substitution, and the direct-injection ablation.

Maps are post-softmax attention tensors of shape (heads, n*n, 77) per
cross-attention layer. Token slots are 1-based in the public API, matching
directive indices; the trailing set is every slot past the prompt length.
The editing loss and substitution operate on head-averaged maps, with
substituted trailing maps broadcast back to all heads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import OptimizationDivergedError, ValidationError
from .regions import RegionDirective, strengthen_mask, weaken_mask

TOKEN_SLOTS = 77


@dataclass
class CrossAttentionMaps:
    """Per-layer stacks of post-softmax cross-attention maps."""

    layers: dict[str, torch.Tensor]  # layer id -> (heads, n*n, 77)
    prompt_length: int

    def __post_init__(self):
        if not (1 <= self.prompt_length < TOKEN_SLOTS):
            raise ValidationError(
                f"prompt length must lie in [1, {TOKEN_SLOTS}), got {self.prompt_length}"
            )
        for layer_id, maps in self.layers.items():
            if maps.ndim != 3 or maps.shape[-1] != TOKEN_SLOTS:
                raise ValidationError(
                    f"layer {layer_id!r} maps must have shape (heads, n*n, {TOKEN_SLOTS})"
                )
            n = int(round(math.sqrt(maps.shape[1])))
            if n * n != maps.shape[1]:
                raise ValidationError(
                    f"layer {layer_id!r} spatial size {maps.shape[1]} is not a perfect square"
                )

    @property
    def trailing_indices(self) -> range:
        """1-based trailing slot indices |P|+1 .. 77."""
        return range(self.prompt_length + 1, TOKEN_SLOTS + 1)

    def resolution(self, layer_id: str) -> int:
        return int(round(math.sqrt(self.layers[layer_id].shape[1])))

    def head_mean(self, layer_id: str) -> torch.Tensor:
        """(n*n, 77) head-averaged maps for one layer."""
        return self.layers[layer_id].mean(dim=0)

    def detach_clone(self) -> "CrossAttentionMaps":
        return CrossAttentionMaps(
            layers={k: v.detach().clone() for k, v in self.layers.items()},
            prompt_length=self.prompt_length,
        )


@dataclass
class TargetMaps:
    """Edited head-averaged maps, defined exactly on the directed and trailing slots.

    Per layer: tensor of shape (77, n, n); undefined slots are zero-filled and
    guarded by `defined`.
    """

    layers: dict[str, torch.Tensor]
    defined: frozenset[int]  # 1-based slot indices
    prompt_length: int

    def get(self, layer_id: str, index: int) -> torch.Tensor:
        if index not in self.defined:
            raise ValidationError(f"target map undefined for token slot {index}")
        return self.layers[layer_id][index - 1]


@dataclass
class OptConfig:
    iterations: int = 5
    learning_rate: float = 5e-4
    init_range: float = 0.15
    warm_start: bool = True

    def __post_init__(self):
        if self.iterations < 0:
            raise ValidationError("iterations must be >= 0")
        if self.learning_rate <= 0:
            raise ValidationError("learning rate must be positive")
        if self.init_range < 0:
            raise ValidationError("init range must be >= 0")


@dataclass
class TrailingWeights:
    """Learned reweighting vector over the trailing attention maps."""

    weights: torch.Tensor
    iterate_history: list[tuple[np.ndarray, float]] = field(default_factory=list)
    init_range: float = 0.15

    @property
    def best_loss(self) -> float:
        return min(loss for _, loss in self.iterate_history)

    def history_json(self, step: int) -> list[dict]:
        return [
            {"step": step, "iter": k, "loss": loss}
            for k, (_, loss) in enumerate(self.iterate_history)
        ]


def _directed_indices(directives: list[RegionDirective]) -> list[int]:
    seen: list[int] = []
    for d in directives:
        for i in d.token_indices:
            if i not in seen:
                seen.append(i)
    return seen


def build_target_maps(
    maps: CrossAttentionMaps,
    directives: list[RegionDirective],
    c: float,
    c_g: float,
) -> TargetMaps:
    """Edited maps D = A (head-averaged) * weaken + strengthen, per layer.

    Each directive edits its own token slots with its own masks; the shared
    trailing slots get the composition of all directives' masks (elementwise
    min of weaken masks, sum of strengthen masks).
    """
    if not directives:
        raise ValidationError("at least one directive is required")
    for d in directives:
        d.validate_against_prompt(maps.prompt_length)

    directed = _directed_indices(directives)
    trailing = list(maps.trailing_indices)
    defined = frozenset(directed) | frozenset(trailing)

    layers: dict[str, torch.Tensor] = {}
    for layer_id, stack in maps.layers.items():
        n = maps.resolution(layer_id)
        avg = maps.head_mean(layer_id).transpose(0, 1).reshape(TOKEN_SLOTS, n, n)

        per_dir = [
            (
                torch.from_numpy(weaken_mask(d.box, n, c)).to(avg.dtype),
                torch.from_numpy(strengthen_mask(d.box, n, c_g)).to(avg.dtype),
            )
            for d in directives
        ]
        weaken_t = per_dir[0][0]
        strengthen_t = per_dir[0][1]
        for w_m, s_m in per_dir[1:]:
            weaken_t = torch.minimum(weaken_t, w_m)
            strengthen_t = strengthen_t + s_m

        target = torch.zeros_like(avg)
        for d, (w_m, s_m) in zip(directives, per_dir):
            for i in d.token_indices:
                target[i - 1] = avg[i - 1] * w_m + s_m
        for i in trailing:
            target[i - 1] = avg[i - 1] * weaken_t + strengthen_t
        layers[layer_id] = target

    return TargetMaps(layers=layers, defined=defined, prompt_length=maps.prompt_length)


def substitution_interceptor(
    weights: torch.Tensor, targets: TargetMaps
):
    """Interceptor replacing trailing slots with weights[j] * D, all heads."""

    def interceptor(layer_id: str, maps: torch.Tensor) -> torch.Tensor:
        n_sq = maps.shape[1]
        n = int(round(math.sqrt(n_sq)))
        t0 = targets.prompt_length  # first trailing slot, 0-based
        target = targets.layers[layer_id][t0:].reshape(TOKEN_SLOTS - t0, n_sq)
        trailing = weights.unsqueeze(1) * target  # (|T|, n*n)
        out = torch.cat(
            [
                maps[:, :, :t0],
                trailing.transpose(0, 1).unsqueeze(0).expand(maps.shape[0], -1, -1),
            ],
            dim=2,
        )
        return out

    return interceptor


def apply_trailing_substitution(
    maps: CrossAttentionMaps, weights: TrailingWeights, targets: TargetMaps
) -> CrossAttentionMaps:
    """Replace trailing slots by weights * target maps; prompt slots untouched."""
    n_trailing = TOKEN_SLOTS - maps.prompt_length
    if weights.weights.numel() != n_trailing:
        raise ValidationError(
            f"expected {n_trailing} trailing weights, got {weights.weights.numel()}"
        )
    interceptor = substitution_interceptor(weights.weights, targets)
    return CrossAttentionMaps(
        layers={k: interceptor(k, v) for k, v in maps.layers.items()},
        prompt_length=maps.prompt_length,
    )


def direct_injection_ablation(
    maps: CrossAttentionMaps,
    directives: list[RegionDirective],
    num_trailing: int,
    c: float,
    c_g: float,
) -> CrossAttentionMaps:
    """Ablation bypassing the optimization: edit the directed slots and the
    first `num_trailing` trailing slots in place with A * weaken + strengthen.
    """
    if not directives:
        raise ValidationError("at least one directive is required")
    n_trailing_total = TOKEN_SLOTS - maps.prompt_length
    if not (0 <= num_trailing <= n_trailing_total):
        raise ValidationError(
            f"num_trailing must lie in [0, {n_trailing_total}], got {num_trailing}"
        )
    for d in directives:
        d.validate_against_prompt(maps.prompt_length)

    edited: dict[str, torch.Tensor] = {}
    for layer_id, stack in maps.layers.items():
        n = maps.resolution(layer_id)
        per_dir = [
            (
                torch.from_numpy(weaken_mask(d.box, n, c)).to(stack.dtype).reshape(-1),
                torch.from_numpy(strengthen_mask(d.box, n, c_g)).to(stack.dtype).reshape(-1),
            )
            for d in directives
        ]
        weaken_t = per_dir[0][0]
        strengthen_t = per_dir[0][1]
        for w_m, s_m in per_dir[1:]:
            weaken_t = torch.minimum(weaken_t, w_m)
            strengthen_t = strengthen_t + s_m

        out = stack.clone()
        for d, (w_m, s_m) in zip(directives, per_dir):
            for i in d.token_indices:
                out[:, :, i - 1] = stack[:, :, i - 1] * w_m + s_m
        for j in range(num_trailing):
            slot = maps.prompt_length + j  # 0-based
            out[:, :, slot] = stack[:, :, slot] * weaken_t + strengthen_t
        edited[layer_id] = out
    return CrossAttentionMaps(layers=edited, prompt_length=maps.prompt_length)


def editing_loss(
    next_maps: CrossAttentionMaps,
    targets: TargetMaps,
    directed: list[int],
) -> torch.Tensor:
    """Squared-error between head-averaged directed maps and their targets,
    summed over layers and directed slots."""
    loss = next_maps.layers[next(iter(next_maps.layers))].new_zeros(())
    for layer_id in next_maps.layers:
        n = next_maps.resolution(layer_id)
        avg = next_maps.head_mean(layer_id).transpose(0, 1).reshape(TOKEN_SLOTS, n, n)
        for i in directed:
            diff = avg[i - 1] - targets.layers[layer_id][i - 1]
            loss = loss + (diff * diff).sum()
    return loss


def init_trailing_weights(
    n_trailing: int, init_range: float, seed: int
) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(n_trailing, generator=gen) * init_range


def optimize_trailing_weights(
    backend,
    z_t: torch.Tensor,
    prompt_embedding: torch.Tensor,
    directives: list[RegionDirective],
    targets: TargetMaps,
    config: OptConfig,
    *,
    step_index: int,
    total_steps: int,
    guidance_scale: float,
    uncond_embedding: torch.Tensor,
    init_weights: torch.Tensor | None = None,
    seed: int = 0,
) -> TrailingWeights:
    """Gradient-descent fit of the trailing-map weights.

    The dependency is functional: weighted target maps substitute the trailing
    slots at step t, the edited step advances the latent, and the loss compares
    the *next* step's directed maps against their targets. Returns the best
    iterate by recorded loss.
    """
    n_trailing = TOKEN_SLOTS - targets.prompt_length
    directed = sorted({i for d in directives for i in d.token_indices})

    if init_weights is not None:
        if init_weights.numel() != n_trailing:
            raise ValidationError("warm-start weight length mismatch")
        a0 = init_weights.detach().clone()
    else:
        a0 = init_trailing_weights(n_trailing, config.init_range, seed)

    a = a0.clone().requires_grad_(True)
    optimizer = torch.optim.Adam([a], lr=config.learning_rate)
    history: list[tuple[np.ndarray, float]] = []
    lookahead = min(step_index + 1, total_steps - 1)

    def evaluate(weights: torch.Tensor) -> torch.Tensor:
        interceptor = substitution_interceptor(weights, targets)
        noise_cond, noise_uncond, _ = backend.denoise_step(
            z_t, prompt_embedding, uncond_embedding, step_index, interceptor
        )
        combined = noise_uncond.detach() + guidance_scale * (
            noise_cond - noise_uncond.detach()
        )
        z_next = backend.scheduler_advance(z_t, combined, step_index, commit=False)
        _, _, next_maps = backend.denoise_step(
            z_next, prompt_embedding, uncond_embedding, lookahead, None
        )
        return editing_loss(next_maps, targets, directed)

    def record(weights: torch.Tensor, loss: torch.Tensor) -> None:
        value = float(loss.detach())
        if not math.isfinite(value):
            raise OptimizationDivergedError(
                f"non-finite loss at step {step_index}", history
            )
        history.append((weights.detach().numpy().copy(), value))

    for _ in range(config.iterations):
        loss = evaluate(a)
        record(a, loss)
        optimizer.zero_grad()
        loss.backward()
        if not torch.isfinite(a.grad).all():
            raise OptimizationDivergedError(
                f"non-finite gradient at step {step_index}", history
            )
        optimizer.step()

    with torch.no_grad():
        record(a, evaluate(a))

    best_idx = min(range(len(history)), key=lambda k: history[k][1])
    best = torch.from_numpy(history[best_idx][0].copy())
    return TrailingWeights(
        weights=best, iterate_history=history, init_range=config.init_range
    )
