"""Acceptance suite: one test per headline criterion, each printing a
single PASS/FAIL line with its measured evidence.

Criteria cover mask oracle equivalence, the Gaussian closed form, the
trailing-weight optimization (best-iterate and mass steering), pipeline
determinism and the editing/refinement stage boundary, latent compositing
arithmetic, placement-finetuning exactness, the experiment harness, and the
HTTP service queue. The pretrained-checkpoint smoke run needs a multi-GB
download and a GPU, so it is opt-in via DD_PRETRAINED_SMOKE=1.
"""

import math
import os
import threading
import time

import numpy as np
import pytest
import torch
from fastapi.testclient import TestClient

from directed_diffusion import (
    BoundingBox,
    DenoiseConfig,
    RegionDirective,
    ToyBackend,
    run_directed_diffusion,
)
from directed_diffusion.attention import build_target_maps
from directed_diffusion.compose import CompositeSpec, composite_latents, run_scene_compositing
from directed_diffusion.harness import (
    DEFAULT_ABLATION_STEPS,
    DEFAULT_ABLATION_TRAILING,
    ablation_grid,
    attention_mass_metric,
    gradient_norm_trace,
    run_ssk,
)
from directed_diffusion.pipeline import plain_sample
from directed_diffusion.placement import (
    Translation,
    cyclic_translate,
    extract_object_mask,
    pf_step_composite,
    run_placement_finetune,
)
from directed_diffusion.regions import (
    gaussian_window,
    strengthen_mask,
    weaken_mask,
)
from directed_diffusion.service import create_app
from directed_diffusion.store import RunStore

PROMPT = "a bear watching a flying bird"
QUADRANT = BoundingBox(0.0, 0.5, 0.0, 0.5)
DIRECTIVE = RegionDirective(box=QUADRANT, token_indices=(3,), label="bear")


def report(name: str, ok: bool, detail: str) -> None:
    print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


def _random_box(rng: np.random.Generator) -> BoundingBox:
    while True:
        lo = rng.uniform(0.0, 0.95, size=2)
        hi = lo + rng.uniform(0.02, 1.0 - lo)
        hi = np.minimum(hi, 1.0)
        if (hi - lo).min() > 1e-3:
            return BoundingBox(lo[0], hi[0], lo[1], hi[1])


def _mask_oracles(box, n, c, amplitude):
    x0 = math.floor(box.left * n)
    x1 = min(math.ceil(box.right * n), n)
    y0 = math.floor(box.top * n)
    y1 = min(math.ceil(box.bottom * n), n)
    b_w, b_h = x1 - x0, y1 - y0
    weaken = np.empty((n, n))
    strengthen = np.zeros((n, n))
    for y in range(n):
        for x in range(n):
            inside = x0 <= x < x1 and y0 <= y < y1
            weaken[y, x] = 1.0 if inside else c
            if inside:
                gx = math.exp(-((x - x0 - (b_w - 1) / 2) ** 2) / (2 * (b_w / 2) ** 2))
                gy = math.exp(-((y - y0 - (b_h - 1) / 2) ** 2) / (2 * (b_h / 2) ** 2))
                strengthen[y, x] = amplitude * gx * gy
    return weaken, strengthen


def test_mask_oracle_equivalence():
    """200 random boxes at three resolutions match scalar double-loop
    oracles elementwise, including assembled target maps."""
    start = time.monotonic()
    rng = np.random.default_rng(0)
    worst = 0.0
    checked = 0
    for _ in range(200):
        box = _random_box(rng)
        for n in (8, 16, 64):
            w_oracle, s_oracle = _mask_oracles(box, n, 0.1, 1.0)
            worst = max(worst, float(np.abs(weaken_mask(box, n, 0.1) - w_oracle).max()))
            worst = max(
                worst, float(np.abs(strengthen_mask(box, n, 1.0) - s_oracle).max())
            )
            checked += 1

    # target-map assembly oracle on a handful of the boxes at latent tier
    from directed_diffusion.attention import TOKEN_SLOTS, CrossAttentionMaps

    gen = torch.Generator().manual_seed(1)
    for trial in range(5):
        box = _random_box(rng)
        n = 8
        raw = torch.rand(2, n * n, TOKEN_SLOTS, generator=gen, dtype=torch.float64)
        maps = CrossAttentionMaps(layers={"attn0": raw}, prompt_length=5)
        d = RegionDirective(box=box, token_indices=(2,))
        targets = build_target_maps(maps, [d], c=0.1, c_g=1.0)
        avg = maps.head_mean("attn0").numpy()
        w_oracle, s_oracle = _mask_oracles(box, n, 0.1, 1.0)
        for slot in [2, 6, 40, 77]:
            got = targets.layers["attn0"][slot - 1].numpy()
            expected = avg[:, slot - 1].reshape(n, n) * w_oracle + s_oracle
            worst = max(worst, float(np.abs(got - expected).max()))

    elapsed = time.monotonic() - start
    report(
        "mask oracle equivalence",
        worst < 1e-6 and elapsed < 5.0,
        f"max abs dev {worst:.2e} over {checked} mask grids, {elapsed:.2f}s",
    )


def test_gaussian_analytic_check():
    """Corner of an even-sized window equals the closed form (exp(-1) per
    axis at the half-extent distance limit); flip symmetry exact."""
    rng = np.random.default_rng(2)
    worst = 0.0
    symmetric = True

    def recovered_sigma(profile: np.ndarray) -> float:
        # profile is proportional to exp(-d^2 / (2 sigma^2)) at integer
        # offsets from the continuous center; solve for sigma from two samples
        size = len(profile)
        d = np.arange(size) - (size - 1) / 2.0
        ratio = math.log(profile[0] / profile.max())
        return math.sqrt((d[0] ** 2 - d[np.argmax(profile)] ** 2) / (-2.0 * ratio))

    for _ in range(20):
        b_w = int(rng.integers(3, 64))
        b_h = int(rng.integers(3, 64))
        g = gaussian_window(b_w, b_h)
        sigma_x = recovered_sigma(g[np.argmax(g.max(axis=1))])
        sigma_y = recovered_sigma(g[:, np.argmax(g.max(axis=0))])
        # continuous corner offset (b_w/2, b_h/2) from center
        corner = math.exp(
            -((b_w / 2) ** 2) / (2 * sigma_x**2) - ((b_h / 2) ** 2) / (2 * sigma_y**2)
        )
        worst = max(worst, abs(corner - math.exp(-1.0)))
        symmetric &= np.array_equal(g, g[::-1, :]) and np.array_equal(g, g[:, ::-1])
    report(
        "gaussian analytic check",
        worst < 1e-6 and symmetric,
        f"max continuous-corner dev from exp(-1) = {worst:.2e}, "
        f"flip symmetry exact: {symmetric}",
    )


def test_optimization_sanity_and_mass_steering():
    """Best-iterate loss never exceeds the initial loss at any edited step,
    and editing strictly raises in-box attention mass of the directed token
    versus the paired unedited baseline for >= 4 of 5 seeds."""
    start = time.monotonic()
    best_iterate_ok = True
    deltas = []
    for seed in range(5):
        masses = {}
        for edit_steps in (10, 0):
            cfg = DenoiseConfig(total_steps=50, edit_steps=edit_steps, seed=seed)
            record = run_directed_diffusion(ToyBackend(), PROMPT, [DIRECTIVE], cfg)
            if edit_steps:
                for entries in record.loss_trace:
                    losses = [e["loss"] for e in entries]
                    best_iterate_ok &= min(losses) >= losses[-1] - 1e-12
                    best_iterate_ok &= losses[-1] <= losses[0]
            # measure the maps one denoise evaluation after the stage boundary
            be = ToyBackend()
            be.configure_schedule(50)
            _, _, maps = be.denoise_step(
                record.latents[10], be.encode_text(PROMPT), be.encode_text(""), 10, None
            )
            masses[edit_steps] = attention_mass_metric(maps, DIRECTIVE)
        deltas.append(masses[10] - masses[0])
    positives = sum(d > 0 for d in deltas)
    elapsed = time.monotonic() - start
    report(
        "editing-loss optimization sanity",
        best_iterate_ok and positives >= 4 and elapsed < 60.0,
        f"best-iterate exact: {best_iterate_ok}; in-box mass gain positive for "
        f"{positives}/5 seeds (deltas {['%+.3f' % d for d in deltas]}), {elapsed:.1f}s",
    )


def test_pipeline_determinism_and_stage_boundary():
    """Same config and seed give bit-identical trajectories; an N=0 run is
    bit-identical to plain sampling; the unconditional branch is untouched
    by editing."""
    start = time.monotonic()
    cfg = DenoiseConfig(total_steps=50, edit_steps=10, seed=0)
    r1 = run_directed_diffusion(ToyBackend(), PROMPT, [DIRECTIVE], cfg)
    r2 = run_directed_diffusion(ToyBackend(), PROMPT, [DIRECTIVE], cfg)
    deterministic = all(torch.equal(a, b) for a, b in zip(r1.latents, r2.latents))
    deterministic &= np.array_equal(r1.image, r2.image)

    cfg0 = DenoiseConfig(total_steps=50, edit_steps=0, seed=0)
    baseline = run_directed_diffusion(ToyBackend(), PROMPT, [DIRECTIVE], cfg0)
    plain = plain_sample(ToyBackend(), PROMPT, cfg0)
    boundary = all(torch.equal(a, b) for a, b in zip(baseline.latents, plain))

    be = ToyBackend()
    be.configure_schedule(50)
    enc_c, enc_u = be.encode_text(PROMPT), be.encode_text("")
    uncond_ok = True
    for i in (0, 5, 9):
        z = r1.latents[i]
        _, u_plain, _ = be.denoise_step(z, enc_c, enc_u, i, None)
        _, u_edited, _ = be.denoise_step(
            z, enc_c, enc_u, i, lambda layer_id, maps: torch.zeros_like(maps)
        )
        uncond_ok &= torch.equal(u_plain, u_edited)

    elapsed = time.monotonic() - start
    report(
        "pipeline determinism and stage boundary",
        deterministic and boundary and uncond_ok and elapsed < 30.0,
        f"replay bit-identical: {deterministic}; N=0 == plain sampling: {boundary}; "
        f"unconditional pass edit-free: {uncond_ok}; {elapsed:.1f}s",
    )


def test_latent_compositing():
    """Blending arithmetic exact cases, permutation invariance, and the
    all-weights-one trajectory identity."""
    z = torch.tensor([1.0])
    three_term = float(
        composite_latents(z, [(torch.tensor([2.0]), 0.5), (torch.tensor([4.0]), 0.5)])
    )
    gen = torch.Generator().manual_seed(0)
    zl = torch.randn(4, 8, 8, generator=gen)
    a = torch.randn(4, 8, 8, generator=gen)
    b = torch.randn(4, 8, 8, generator=gen)
    identity_ok = torch.equal(composite_latents(zl, [(a, 1.0)]), zl)
    source_ok = torch.equal(composite_latents(zl, [(a, 0.0)]), a)
    perm_ok = torch.equal(
        composite_latents(zl, [(a, 0.1), (b, 0.3)]),
        composite_latents(zl, [(b, 0.3), (a, 0.1)]),
    )

    src = run_directed_diffusion(
        ToyBackend(),
        "a bear in a forest",
        [RegionDirective(box=QUADRANT, token_indices=(2,))],
        DenoiseConfig(total_steps=20, edit_steps=2, seed=1),
    )
    cfg = DenoiseConfig(total_steps=20, edit_steps=2, seed=0)
    spec = CompositeSpec(full_prompt=PROMPT, sources=[(src.run_id, 1.0)], edit_steps=2)
    composed = run_scene_compositing(ToyBackend(), spec, [src], cfg)
    plain = plain_sample(ToyBackend(), PROMPT, cfg)
    all_one_ok = all(torch.equal(x, y) for x, y in zip(composed.latents, plain))

    ok = (
        three_term == 2.0 and identity_ok and source_ok and perm_ok and all_one_ok
    )
    report(
        "latent compositing",
        ok,
        f"three-term example = {three_term} (want 2.0); identity at w=1: {identity_ok}; "
        f"source at w=0: {source_ok}; permutation exact: {perm_ok}; "
        f"all-w=1 trajectory == plain run: {all_one_ok}",
    )


def test_placement_finetuning():
    """Cyclic translation preserves content exactly; the per-step composite
    is local to the translated mask; zero-translation with maximal N
    reproduces the source image bit-exactly."""
    gen = torch.Generator().manual_seed(0)
    z = torch.randn(4, 8, 8, generator=gen)
    t = Translation(dx=3, dy=-2)
    norm_ok = float(torch.linalg.vector_norm(cyclic_translate(z, t))) == float(
        torch.linalg.vector_norm(z)
    )

    cfg = DenoiseConfig(total_steps=20, edit_steps=3, seed=0)
    source = run_directed_diffusion(ToyBackend(), PROMPT, [DIRECTIVE], cfg)
    mask = extract_object_mask(source.final_attention, DIRECTIVE, 0.5)

    z_new = torch.randn(4, 8, 8, generator=gen)
    z_src = torch.randn(4, 8, 8, generator=gen)
    out = pf_step_composite(z_new, z_src, mask, t)
    xm = torch.from_numpy(cyclic_translate(mask.values, t)).to(z_new.dtype)
    local_ok = torch.equal(out * (1 - xm), z_new * (1 - xm))
    moved_ok = torch.equal(out * xm, cyclic_translate(z_src, t) * xm)

    pf = run_placement_finetune(
        ToyBackend(), source, DIRECTIVE, Translation(0, 0), edit_steps=cfg.total_steps - 1
    )
    exact_ok = np.array_equal(pf.image, source.image)

    report(
        "placement finetuning",
        norm_ok and local_ok and moved_ok and exact_ok,
        f"translation norm-preserving: {norm_ok}; composite local: {local_ok}; "
        f"moved region from source: {moved_ok}; zero-translation maximal-N image "
        f"bit-exact: {exact_ok}",
    )


def test_harness(tmp_path):
    """SS@12 covers seeds 0..11, the default ablation grid is 4x5, the
    gradient-norm trace matches its linear oracle and is positive on a real
    run, and the run store round-trips bit-exactly."""
    store = RunStore(tmp_path / "store")
    cfg = DenoiseConfig(total_steps=6, edit_steps=1, seed=0)
    results = run_ssk(ToyBackend(), PROMPT, [DIRECTIVE], 12, 0, cfg, store=store)
    seeds_ok = [r.seed for r in results] == list(range(12))

    grid_ok = (DEFAULT_ABLATION_TRAILING, DEFAULT_ABLATION_STEPS) == (
        (5, 10, 15, 20),
        (1, 3, 5, 10, 15),
    )
    grid = ablation_grid(
        ToyBackend(), PROMPT, DIRECTIVE, (5, 10), (1, 3), cfg
    )
    grid_ok &= len(grid) == 2 and all(len(row) == 2 for row in grid)

    v = torch.randn(4, 8, 8, generator=torch.Generator().manual_seed(1))
    from directed_diffusion.pipeline import RunRecord

    linear = RunRecord(
        run_id="lin",
        kind="generate",
        config=DenoiseConfig(total_steps=7, edit_steps=0),
        prompt="x",
        directives=[],
        latents=[float(k) * v for k in range(8)],
        final_attention=None,
        loss_trace=[],
        image=None,
    )
    trace = gradient_norm_trace(linear)
    oracle_ok = np.allclose(trace, float(torch.linalg.vector_norm(v)), rtol=1e-6)

    real = store.load(results[0].run_id)
    positive_ok = (np.asarray(gradient_norm_trace(real)) > 0).all()

    round_ok = all(
        torch.equal(a, b) for a, b in zip(real.latents, store.load(real.run_id).latents)
    )

    report(
        "experiment harness",
        seeds_ok and grid_ok and oracle_ok and positive_ok and round_ok,
        f"SS@12 seeds 0..11: {seeds_ok}; grid layout: {grid_ok}; linear-trace "
        f"oracle: {oracle_ok}; real-run trace positive: {positive_ok}; store "
        f"round-trip bit-exact: {round_ok}",
    )


def test_service_contract(tmp_path):
    """Schema violations yield 422 with field names; 20 concurrent
    submissions execute FIFO with a single running job."""
    start = time.monotonic()
    app = create_app(tmp_path / "store", backend=ToyBackend())
    client = TestClient(app)

    bad = {
        "prompt": "a bear",
        "directives": [
            {
                "box": {"left": 1.2, "right": 0.5, "top": 0.0, "bottom": 0.5},
                "token_indices": [2],
            }
        ],
    }
    r = client.post("/jobs/generate", json=bad)
    fields = [d["field"] for d in r.json().get("detail", [])] if r.status_code == 422 else []
    schema_ok = r.status_code == 422 and any("box.left" in f for f in fields)

    payload = {
        "prompt": "a bear",
        "directives": [
            {
                "box": {"left": 0.0, "right": 0.5, "top": 0.0, "bottom": 0.5},
                "token_indices": [2],
            }
        ],
        "total_steps": 4,
        "edit_steps": 0,
    }
    job_ids = []
    lock = threading.Lock()

    def fire(seed):
        body = dict(payload, seed=seed)
        data = client.post("/jobs/generate", json=body).json()
        with lock:
            job_ids.append(data["job_id"])

    threads = [threading.Thread(target=fire, args=(s,)) for s in range(20)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    done = all(
        client.get(f"/jobs/{jid}", params={"timeout": 60}).json()["status"] == "done"
        for jid in job_ids
    )
    single_running = app.state.worker.max_observed_running == 1
    app.state.worker.shutdown()
    elapsed = time.monotonic() - start
    report(
        "service contract",
        schema_ok and done and single_running and elapsed < 60.0,
        f"422 names box.left: {schema_ok}; 20 concurrent jobs completed: {done}; "
        f"max simultaneous running jobs = {app.state.worker.max_observed_running}; "
        f"{elapsed:.1f}s",
    )


@pytest.mark.skipif(
    os.environ.get("DD_PRETRAINED_SMOKE") != "1",
    reason="needs a pretrained checkpoint and GPU; set DD_PRETRAINED_SMOKE=1",
)
def test_pretrained_smoke():
    """One full-default run on the pretrained backend steers in-box mass
    above the same-seed undirected baseline."""
    from directed_diffusion.backend import make_backend

    backend = make_backend({"backend": "pretrained"})
    cfg = DenoiseConfig(total_steps=50, edit_steps=10, seed=0)
    directive = RegionDirective(box=QUADRANT, token_indices=(2,), label="cat")
    edited = run_directed_diffusion(backend, "a cat sitting on a car", [directive], cfg)
    baseline = run_directed_diffusion(
        backend,
        "a cat sitting on a car",
        [directive],
        DenoiseConfig(total_steps=50, edit_steps=0, seed=0),
    )
    gained = attention_mass_metric(
        edited.final_attention, directive
    ) > attention_mass_metric(baseline.final_attention, directive)
    report("pretrained smoke", gained, f"in-box mass exceeds baseline: {gained}")
