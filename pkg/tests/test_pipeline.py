"""End-to-end directed generation: determinism, stage boundary, CFG."""

import numpy as np
import pytest
import torch

from directed_diffusion import (
    DenoiseConfig,
    RegionDirective,
    ToyBackend,
    cfg_combine,
    run_directed_diffusion,
)
from directed_diffusion.errors import ValidationError
from directed_diffusion.pipeline import plain_sample, run_direct_injection

from conftest import PROMPT, QUADRANT


class TestCfgCombine:
    def test_formula(self):
        u = torch.tensor([1.0, 2.0])
        c = torch.tensor([3.0, 0.0])
        out = cfg_combine(u, c, 7.5)
        assert torch.allclose(out, u + 7.5 * (c - u))

    def test_weight_one_returns_conditional(self):
        u = torch.randn(4, generator=torch.Generator().manual_seed(0))
        c = torch.randn(4, generator=torch.Generator().manual_seed(1))
        assert torch.allclose(cfg_combine(u, c, 1.0), c)

    def test_weight_zero_returns_unconditional(self):
        u = torch.randn(4, generator=torch.Generator().manual_seed(2))
        c = torch.randn(4, generator=torch.Generator().manual_seed(3))
        assert torch.allclose(cfg_combine(u, c, 0.0), u)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            cfg_combine(torch.zeros(3), torch.zeros(4), 7.5)


class TestDenoiseConfig:
    def test_json_round_trip(self):
        cfg = DenoiseConfig(total_steps=30, edit_steps=5, seed=9)
        assert DenoiseConfig.from_json(cfg.to_json()) == cfg

    def test_edit_steps_beyond_total_rejected(self):
        with pytest.raises(ValidationError):
            DenoiseConfig(total_steps=10, edit_steps=11)


class TestDirectedRun:
    def test_repeat_run_bit_identical(self, directive):
        cfg = DenoiseConfig(total_steps=15, edit_steps=3, seed=4)
        r1 = run_directed_diffusion(ToyBackend(), PROMPT, [directive], cfg)
        r2 = run_directed_diffusion(ToyBackend(), PROMPT, [directive], cfg)
        assert all(torch.equal(a, b) for a, b in zip(r1.latents, r2.latents))
        assert np.array_equal(r1.image, r2.image)
        assert r1.run_id != r2.run_id

    def test_zero_edit_steps_equals_plain_sampling(self, directive):
        cfg = DenoiseConfig(total_steps=15, edit_steps=0, seed=0)
        record = run_directed_diffusion(ToyBackend(), PROMPT, [directive], cfg)
        plain = plain_sample(ToyBackend(), PROMPT, cfg)
        assert all(torch.equal(a, b) for a, b in zip(record.latents, plain))

    def test_unconditional_pass_unaffected_by_editing(self, directive):
        """The unconditional replay on an edited trajectory's latent equals
        the unconditional prediction of an interceptor-free pass: editing only
        touches the conditional branch."""
        cfg = DenoiseConfig(total_steps=15, edit_steps=3, seed=0)
        record = run_directed_diffusion(ToyBackend(), PROMPT, [directive], cfg)
        be = ToyBackend()
        be.configure_schedule(15)
        enc_c, enc_u = be.encode_text(PROMPT), be.encode_text("")
        for i in (0, 1, 2):
            z = record.latents[i]
            _, u1, _ = be.denoise_step(z, enc_c, enc_u, i, None)
            _, u2, _ = be.denoise_step(
                z, enc_c, enc_u, i, lambda layer_id, maps: torch.zeros_like(maps)
            )
            assert torch.equal(u1, u2)

    def test_trajectory_length_and_loss_trace(self, short_record):
        cfg = short_record.config
        assert len(short_record.latents) == cfg.total_steps + 1
        assert len(short_record.loss_trace) == cfg.edit_steps
        for step_entries in short_record.loss_trace:
            # iterations + final evaluation
            assert len(step_entries) == cfg.opt.iterations + 1

    def test_per_step_loss_histories_are_best_iterate(self, short_record):
        for entries in short_record.loss_trace:
            losses = [e["loss"] for e in entries]
            assert losses[-1] <= losses[0]
            assert losses[-1] == min(losses)

    def test_record_manifest_is_json_ready(self, short_record):
        import json

        manifest = short_record.manifest()
        text = json.dumps(manifest)
        assert short_record.run_id in text

    def test_image_is_rgb_uint8(self, short_record):
        assert short_record.image.dtype == np.uint8
        assert short_record.image.ndim == 3
        assert short_record.image.shape[2] == 3


class TestDirectInjectionRun:
    def test_runs_and_differs_from_optimized(self, directive):
        cfg = DenoiseConfig(total_steps=15, edit_steps=3, seed=0)
        direct = run_direct_injection(ToyBackend(), PROMPT, [directive], 5, cfg)
        optimized = run_directed_diffusion(ToyBackend(), PROMPT, [directive], cfg)
        assert direct.kind == "direct"
        assert len(direct.latents) == 16
        assert not torch.equal(direct.latents[-1], optimized.latents[-1])

    def test_zero_everything_is_baseline(self, directive):
        cfg = DenoiseConfig(total_steps=15, edit_steps=0, seed=0)
        direct = run_direct_injection(ToyBackend(), PROMPT, [directive], 0, cfg)
        plain = plain_sample(ToyBackend(), PROMPT, cfg)
        assert all(torch.equal(a, b) for a, b in zip(direct.latents, plain))
