"""Adapter wiring the backend contract onto a pretrained latent-diffusion
checkpoint via the `diffusers` library.

Optional install: `pip install directed-diffusion[pretrained]`. Nothing in the
default test suite touches this module. The checkpoint cache directory can be
set with the DD_MODEL_CACHE environment variable.
"""

from __future__ import annotations

import math
import os

import numpy as np
import torch

from .attention import TOKEN_SLOTS, CrossAttentionMaps
from .backend import DiffusionBackend, LayerInfo, TextEncoding
from .errors import CapabilityError, ValidationError
from .scheduler import LMSScheduler


class PretrainedBackend(DiffusionBackend):
    """Stable-Diffusion checkpoint behind the backend contract.

    Attention interception monkey-patches each cross-attention processor so the
    post-softmax probabilities can be captured and substituted. The host
    model's own attention arithmetic (scaling, heads) is preserved.
    """

    def __init__(self, model_id: str = "CompVis/stable-diffusion-v1-4", device: str = "cuda"):
        try:
            from diffusers import StableDiffusionPipeline
        except ImportError as exc:  # pragma: no cover - optional dependency
            raise CapabilityError(
                "the pretrained backend requires the 'diffusers' extra: "
                "pip install directed-diffusion[pretrained]"
            ) from exc

        cache_dir = os.environ.get("DD_MODEL_CACHE")
        pipe = StableDiffusionPipeline.from_pretrained(
            model_id, cache_dir=cache_dir, safety_checker=None
        )
        self.device = torch.device(device)
        self.pipe = pipe.to(self.device)
        self.unet = pipe.unet
        self.vae = pipe.vae
        self.tokenizer = pipe.tokenizer
        self.text_encoder = pipe.text_encoder
        self._scheduler: LMSScheduler | None = None
        self._latent_res = self.unet.config.sample_size
        self._manifest = self._discover_layers()

    def _discover_layers(self) -> list[LayerInfo]:
        layers = []
        for name, module in self.unet.named_modules():
            if name.endswith("attn2") and hasattr(module, "heads"):
                layers.append(LayerInfo(name, 0, module.heads))
        if not layers:
            raise CapabilityError("checkpoint exposes no cross-attention layers")
        return layers

    @property
    def layer_manifest(self) -> list[LayerInfo]:
        return self._manifest

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.unet.config.in_channels, self._latent_res, self._latent_res)

    def encode_text(self, prompt: str) -> TextEncoding:
        tokens = self.tokenizer(
            prompt,
            padding="max_length",
            max_length=TOKEN_SLOTS,
            truncation=False,
            return_tensors="pt",
        )
        n_real = int(tokens.attention_mask.sum())
        if tokens.input_ids.shape[-1] > TOKEN_SLOTS:
            raise ValidationError(
                f"prompt tokenizes to {tokens.input_ids.shape[-1]} tokens, limit {TOKEN_SLOTS}"
            )
        with torch.no_grad():
            embedding = self.text_encoder(tokens.input_ids.to(self.device))[0][0]
        return TextEncoding(embedding=embedding, prompt_length=n_real)

    def sample_initial_latent(self, seed: int) -> torch.Tensor:
        if seed < 0:
            raise ValidationError(f"seed must be >= 0, got {seed}")
        gen = torch.Generator().manual_seed(int(seed))
        return torch.randn(*self.latent_shape, generator=gen).to(self.device)

    def configure_schedule(self, num_steps: int) -> None:
        self._scheduler = LMSScheduler(
            num_steps,
            beta_start=0.00085,
            beta_end=0.012,
            schedule="scaled_linear",
            order=4,
        )

    @property
    def scheduler(self) -> LMSScheduler:
        if self._scheduler is None:
            raise CapabilityError("configure_schedule must be called before stepping")
        return self._scheduler

    @property
    def num_steps(self) -> int:
        return self.scheduler.num_steps

    def scheduler_advance(self, z_t, combined_noise, step_index, commit=True):
        return self.scheduler.advance(z_t, combined_noise, step_index, commit=commit)

    def add_noise(self, z: torch.Tensor, step_index: int, seed: int) -> torch.Tensor:
        gap = self.scheduler.noise_gap(step_index)
        gen = torch.Generator().manual_seed(int(seed))
        return z + gap * torch.randn(*z.shape, generator=gen).to(z.device)

    def _timestep(self, step_index: int) -> torch.Tensor:
        sigma = self.scheduler.sigma(step_index)
        # invert sigma(t) of the training schedule to the nearest discrete t
        betas = (
            np.linspace(0.00085**0.5, 0.012**0.5, 1000, dtype=np.float64) ** 2
        )
        ac = np.cumprod(1.0 - betas)
        sigmas = np.sqrt((1.0 - ac) / ac)
        t = int(np.abs(sigmas - sigma).argmin())
        return torch.tensor([t], device=self.device)

    def _run_unet(self, z_scaled, embedding, step_index, interceptor):
        captured: dict[str, torch.Tensor] = {}
        hooks = []

        def patch(layer: LayerInfo):
            module = self.unet.get_submodule(layer.layer_id)
            original = module.get_attention_scores

            def wrapped(query, key, attention_mask=None):
                probs = original(query, key, attention_mask)
                heads = layer.heads
                n_sq = probs.shape[-2]
                shaped = probs.reshape(heads, n_sq, probs.shape[-1])
                captured[layer.layer_id] = shaped
                if interceptor is not None:
                    edited = interceptor(layer.layer_id, shaped)
                    if edited is not None:
                        if edited.shape != shaped.shape:
                            raise CapabilityError(
                                "interceptor returned wrong-shape maps for "
                                f"{layer.layer_id}"
                            )
                        return edited.reshape(probs.shape)
                return probs

            module.get_attention_scores = wrapped
            hooks.append((module, original))

        for layer in self._manifest:
            patch(layer)
        try:
            noise = self.unet(
                z_scaled.unsqueeze(0),
                self._timestep(step_index),
                encoder_hidden_states=embedding.unsqueeze(0),
            ).sample[0]
        finally:
            for module, original in hooks:
                module.get_attention_scores = original
        return noise, captured

    def denoise_step(
        self, z_t, embedding_cond, embedding_uncond, step_index, attention_interceptor=None
    ):
        z_scaled = self.scheduler.scale_model_input(z_t, step_index)
        noise_cond, captured = self._run_unet(
            z_scaled, embedding_cond.embedding, step_index, attention_interceptor
        )
        with torch.no_grad():
            noise_uncond, _ = self._run_unet(
                z_scaled.detach(), embedding_uncond.embedding, step_index, None
            )
        maps = CrossAttentionMaps(
            layers=captured, prompt_length=embedding_cond.prompt_length
        )
        return noise_cond, noise_uncond, maps

    def decode(self, z_0: torch.Tensor) -> np.ndarray:
        with torch.no_grad():
            image = self.vae.decode(
                z_0.unsqueeze(0) / self.vae.config.scaling_factor
            ).sample[0]
        image = ((image.clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
        return image.permute(1, 2, 0).cpu().numpy()
