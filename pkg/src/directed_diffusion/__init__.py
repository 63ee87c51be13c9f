"""Directed placement control for latent diffusion via cross-attention editing."""

from .backend import DiffusionBackend, TextEncoding, ToyBackend, make_backend
from .pipeline import DenoiseConfig, RunRecord, cfg_combine, run_directed_diffusion
from .regions import BoundingBox, RegionDirective

__all__ = [
    "BoundingBox",
    "DenoiseConfig",
    "DiffusionBackend",
    "RegionDirective",
    "RunRecord",
    "TextEncoding",
    "ToyBackend",
    "cfg_combine",
    "make_backend",
    "run_directed_diffusion",
]
