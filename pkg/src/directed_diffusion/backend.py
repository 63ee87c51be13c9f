"""Diffusion backend contract plus the deterministic toy backend.

The toy backend is a small fixed-weight torch network: latent 4x8x8, one
cross-attention layer at 8x8 with 2 heads, embedding width 16. Every source
of randomness is an explicit seed, so runs are bit-reproducible on CPU. Its
wiring is chosen so that boosting the conditioning inside a spatial region
raises the next step's attention logits for the prompt tokens there, giving
the attention-editing loop a measurable effect to steer.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np
import torch

from .attention import TOKEN_SLOTS, CrossAttentionMaps
from .errors import CapabilityError, ValidationError
from .scheduler import LMSScheduler


@dataclass(frozen=True)
class LayerInfo:
    layer_id: str
    resolution: int
    heads: int


@dataclass(frozen=True)
class TextEncoding:
    """Prompt embedding (77 x L) together with the prompt token count |P|."""

    embedding: torch.Tensor
    prompt_length: int

    def __iter__(self):
        # allow (embedding, prompt_length) unpacking per the contract
        return iter((self.embedding, self.prompt_length))


class DiffusionBackend:
    """Capability contract every backend implements."""

    def encode_text(self, prompt: str) -> TextEncoding:
        raise NotImplementedError

    def sample_initial_latent(self, seed: int) -> torch.Tensor:
        raise NotImplementedError

    def configure_schedule(self, num_steps: int) -> None:
        raise NotImplementedError

    def denoise_step(
        self,
        z_t: torch.Tensor,
        embedding_cond: torch.Tensor,
        embedding_uncond: torch.Tensor,
        step_index: int,
        attention_interceptor=None,
    ) -> tuple[torch.Tensor, torch.Tensor, CrossAttentionMaps]:
        raise NotImplementedError

    def scheduler_advance(
        self, z_t: torch.Tensor, combined_noise: torch.Tensor, step_index: int, commit: bool = True
    ) -> torch.Tensor:
        raise NotImplementedError

    def add_noise(self, z: torch.Tensor, step_index: int, seed: int) -> torch.Tensor:
        raise NotImplementedError

    def decode(self, z_0: torch.Tensor) -> np.ndarray:
        raise NotImplementedError

    @property
    def layer_manifest(self) -> list[LayerInfo]:
        raise NotImplementedError

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        raise NotImplementedError

    @property
    def num_steps(self) -> int:
        raise NotImplementedError


def _token_vector(token: str, dim: int) -> torch.Tensor:
    seed = zlib.crc32(token.encode("utf-8")) & 0x7FFFFFFF
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(dim, generator=gen)


class ToyBackend(DiffusionBackend):
    """Deterministic desk-scale backend satisfying the full contract."""

    LATENT_SHAPE = (4, 8, 8)
    EMBED_DIM = 16
    HIDDEN = 8
    HEADS = 2
    HEAD_DIM = 8
    RESOLUTION = 8
    MAX_CONTENT_TOKENS = 75

    def __init__(self, weight_seed: int = 42, scheduler_order: int = 1):
        gen = torch.Generator().manual_seed(weight_seed)

        def rand(*shape, scale=1.0):
            return torch.randn(*shape, generator=gen) * scale

        c, h, w = self.LATENT_SHAPE
        hid, hd = self.HIDDEN, self.HEAD_DIM

        # input lift 4->8: stacked identity plus a small random part
        eye = torch.eye(c)
        self.w_in = torch.cat([eye, eye], dim=0) * 0.7 + rand(hid, c, scale=0.05)
        # output 8->4 folds the two identity copies back, negated so the
        # predicted noise *subtracts* attended content from the latent
        fold = torch.cat([eye, eye], dim=1)
        self.w_out = 0.35 * fold + rand(c, hid, scale=0.05)

        self.res1_w = rand(hid, hid, scale=0.15)
        self.res2_w = rand(hid, hid, scale=0.15)
        self.time_w = rand(hid, 2, scale=0.1)

        # per-head projections; w_o inverts w_q so attended content re-enters
        # the next query in the same head coordinates
        self.w_q, self.w_k = [], []
        blocks = []
        for _ in range(self.HEADS):
            q = torch.linalg.qr(rand(hd, hd))[0]
            self.w_q.append(q)
            self.w_k.append(rand(self.EMBED_DIM, hd, scale=1.0 / math.sqrt(self.EMBED_DIM)))
            blocks.append(q.T)
        self.w_o = torch.cat(blocks, dim=0) * 0.5  # (heads*hd, hid)
        self.attn_gain = 1.0

        self.pos_embed = rand(TOKEN_SLOTS, self.EMBED_DIM, scale=0.1)
        self.trail_noise = rand(TOKEN_SLOTS, self.EMBED_DIM, scale=0.15)
        self.decode_w = rand(3, c, scale=0.6)

        self._scheduler_order = scheduler_order
        self._scheduler: LMSScheduler | None = None

    # -- text ---------------------------------------------------------------

    def tokenize(self, prompt: str) -> list[str]:
        content = prompt.split()
        if len(content) > self.MAX_CONTENT_TOKENS:
            raise ValidationError(
                f"prompt has {len(content)} tokens, limit is {self.MAX_CONTENT_TOKENS}"
            )
        return ["<start>", *content, "<end>"]

    def encode_text(self, prompt: str) -> TextEncoding:
        tokens = self.tokenize(prompt)
        p = len(tokens)
        embedding = torch.zeros(TOKEN_SLOTS, self.EMBED_DIM)
        content_vecs = []
        for s, token in enumerate(tokens):
            vec = _token_vector(token, self.EMBED_DIM)
            content_vecs.append(vec)
            embedding[s] = vec + self.pos_embed[s]
        # trailing slots carry the sentence mean plus a distinct per-slot
        # perturbation, mirroring how CLIP padding slots encode the sentence
        mean_vec = torch.stack(content_vecs).mean(dim=0)
        for s in range(p, TOKEN_SLOTS):
            embedding[s] = mean_vec + self.trail_noise[s]
        return TextEncoding(embedding=embedding, prompt_length=p)

    # -- latents ------------------------------------------------------------

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return self.LATENT_SHAPE

    def sample_initial_latent(self, seed: int) -> torch.Tensor:
        if seed < 0:
            raise ValidationError(f"seed must be >= 0, got {seed}")
        gen = torch.Generator().manual_seed(int(seed))
        return torch.randn(*self.LATENT_SHAPE, generator=gen)

    # -- scheduling ---------------------------------------------------------

    def configure_schedule(self, num_steps: int) -> None:
        self._scheduler = LMSScheduler(num_steps, order=self._scheduler_order)

    @property
    def scheduler(self) -> LMSScheduler:
        if self._scheduler is None:
            raise CapabilityError("configure_schedule must be called before stepping")
        return self._scheduler

    @property
    def num_steps(self) -> int:
        return self.scheduler.num_steps

    def scheduler_advance(
        self, z_t: torch.Tensor, combined_noise: torch.Tensor, step_index: int, commit: bool = True
    ) -> torch.Tensor:
        return self.scheduler.advance(z_t, combined_noise, step_index, commit=commit)

    def add_noise(self, z: torch.Tensor, step_index: int, seed: int) -> torch.Tensor:
        """Lift a step-`step_index` latent back one noise level."""
        gap = self.scheduler.noise_gap(step_index)
        gen = torch.Generator().manual_seed(int(seed))
        return z + gap * torch.randn(*z.shape, generator=gen)

    # -- denoiser -----------------------------------------------------------

    @property
    def layer_manifest(self) -> list[LayerInfo]:
        return [LayerInfo("attn0", self.RESOLUTION, self.HEADS)]

    def _features(self, z: torch.Tensor, sigma: float) -> torch.Tensor:
        """(n*n, hidden) pre-attention features."""
        c, h, w = self.LATENT_SHAPE
        x = z.reshape(c, h * w).transpose(0, 1)  # (n*n, c)
        feats = x @ self.w_in.T
        t = torch.tensor([math.log(sigma + 1e-4), 1.0])
        feats = feats + (self.time_w @ t)
        feats = feats + 0.1 * torch.tanh(feats @ self.res1_w.T)
        return feats

    def _forward(
        self, z_scaled: torch.Tensor, embedding: torch.Tensor, sigma: float, interceptor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Run the denoiser; returns (noise_pred, raw attention maps)."""
        feats = self._features(z_scaled, sigma)

        queries = [feats @ q for q in self.w_q]  # (n*n, hd) per head
        keys = [embedding @ k for k in self.w_k]  # (77, hd) per head
        raw = torch.stack(
            [
                torch.softmax(q @ k.T / math.sqrt(self.HEAD_DIM), dim=-1)
                for q, k in zip(queries, keys)
            ]
        )  # (heads, n*n, 77)

        maps = raw
        if interceptor is not None:
            edited = interceptor("attn0", raw)
            if edited is not None:
                if edited.shape != raw.shape:
                    raise CapabilityError(
                        f"interceptor returned shape {tuple(edited.shape)}, "
                        f"expected {tuple(raw.shape)}"
                    )
                maps = edited

        values = keys  # tied value/key projection
        attended = torch.cat(
            [maps[i] @ values[i] for i in range(self.HEADS)], dim=1
        )  # (n*n, heads*hd)
        feats = feats + self.attn_gain * (attended @ self.w_o)
        feats = feats + 0.1 * torch.tanh(feats @ self.res2_w.T)
        eps = feats @ self.w_out.T  # (n*n, c)
        c, h, w = self.LATENT_SHAPE
        return eps.transpose(0, 1).reshape(c, h, w), raw

    def denoise_step(
        self,
        z_t: torch.Tensor,
        embedding_cond: TextEncoding,
        embedding_uncond: TextEncoding,
        step_index: int,
        attention_interceptor=None,
    ) -> tuple[torch.Tensor, torch.Tensor, CrossAttentionMaps]:
        sigma = self.scheduler.sigma(step_index)
        z_scaled = self.scheduler.scale_model_input(z_t, step_index)
        noise_cond, raw = self._forward(
            z_scaled, embedding_cond.embedding, sigma, attention_interceptor
        )
        # the unconditional pass is never intercepted and never needs grad
        with torch.no_grad():
            noise_uncond, _ = self._forward(
                z_scaled.detach(), embedding_uncond.embedding, sigma, None
            )
        maps = CrossAttentionMaps(
            layers={"attn0": raw}, prompt_length=embedding_cond.prompt_length
        )
        return noise_cond, noise_uncond, maps

    # -- decoding -----------------------------------------------------------

    def decode(self, z_0: torch.Tensor) -> np.ndarray:
        if tuple(z_0.shape) != self.LATENT_SHAPE:
            raise ValidationError(
                f"latent shape {tuple(z_0.shape)} does not match {self.LATENT_SHAPE}"
            )
        with torch.no_grad():
            c, h, w = self.LATENT_SHAPE
            rgb = torch.tanh(
                (self.decode_w @ z_0.reshape(c, h * w)).reshape(3, h, w)
            )
            rgb = (rgb + 1.0) * 127.5
            image = rgb.round().clamp(0, 255).to(torch.uint8)
            image = image.repeat_interleave(8, dim=1).repeat_interleave(8, dim=2)
        return image.permute(1, 2, 0).numpy()


def make_backend(config: dict | None = None) -> DiffusionBackend:
    """Build a backend from a selection config.

    {"backend": "toy" | "pretrained", "model_id": str, "device": str}
    """
    config = dict(config or {})
    kind = config.get("backend", "toy")
    if kind == "toy":
        return ToyBackend()
    if kind == "pretrained":
        from .pretrained import PretrainedBackend

        return PretrainedBackend(
            model_id=config.get("model_id", "CompVis/stable-diffusion-v1-4"),
            device=config.get("device", "cuda"),
        )
    raise ValidationError(f"unknown backend kind {kind!r}")
