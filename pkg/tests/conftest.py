import pytest
import torch

from directed_diffusion import (
    BoundingBox,
    DenoiseConfig,
    RegionDirective,
    ToyBackend,
    run_directed_diffusion,
)

PROMPT = "a bear watching a flying bird"
QUADRANT = BoundingBox(0.0, 0.5, 0.0, 0.5)


@pytest.fixture()
def backend():
    return ToyBackend()


@pytest.fixture()
def directive():
    return RegionDirective(box=QUADRANT, token_indices=(3,), label="bear")


@pytest.fixture(scope="session")
def captured_maps():
    """Unedited attention maps from a fresh toy backend at the first step."""
    be = ToyBackend()
    be.configure_schedule(20)
    z = be.sample_initial_latent(0)
    _, _, maps = be.denoise_step(z, be.encode_text(PROMPT), be.encode_text(""), 0, None)
    return maps.detach_clone()


@pytest.fixture(scope="session")
def short_record():
    """A quick directed run shared by read-only tests."""
    d = RegionDirective(box=QUADRANT, token_indices=(3,), label="bear")
    return run_directed_diffusion(
        ToyBackend(),
        PROMPT,
        [d],
        DenoiseConfig(total_steps=20, edit_steps=3, seed=0),
    )
