"""Command-line interface: generation, seed batches, compositing, placement
finetuning, ablation grids, diagnostics reports, and the HTTP service.

Every subcommand persists run manifests to a RunStore root taken from
``--store`` or the ``DD_STORE`` environment variable.
"""

from __future__ import annotations

import csv
import json
import sys
from pathlib import Path

import click

from .attention import OptConfig
from .backend import make_backend
from .compose import CompositeSpec, run_scene_compositing
from .harness import ablation_grid, gradient_norm_trace, run_ssk
from .pipeline import DenoiseConfig, run_directed_diffusion
from .placement import Translation, run_placement_finetune
from .plots import (
    render_ablation_contact_sheet,
    render_gradient_norm_figure,
    render_loss_trace_figure,
    render_seed_contact_sheet,
)
from .regions import BoundingBox, RegionDirective
from .store import RunStore


def _parse_box(text: str) -> BoundingBox:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 4:
        raise click.BadParameter("expected left,right,top,bottom")
    return BoundingBox(*parts)


def _parse_tokens(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(","))


def _store(ctx: click.Context) -> RunStore:
    return RunStore(ctx.obj["store_root"])


def _backend(ctx: click.Context):
    return make_backend({"backend": ctx.obj["backend"]})


@click.group()
@click.option(
    "--store",
    "store_root",
    envvar="DD_STORE",
    default="runs",
    show_default=True,
    help="RunStore root directory (env: DD_STORE).",
)
@click.option(
    "--backend",
    type=click.Choice(["toy", "pretrained"]),
    default="toy",
    show_default=True,
)
@click.pass_context
def main(ctx: click.Context, store_root: str, backend: str) -> None:
    """Positional control of objects in diffusion image generation."""
    ctx.ensure_object(dict)
    ctx.obj["store_root"] = store_root
    ctx.obj["backend"] = backend


def _sampling_options(fn):
    fn = click.option("--steps", default=50, show_default=True)(fn)
    fn = click.option("--edit-steps", default=10, show_default=True)(fn)
    fn = click.option("--guidance", default=7.5, show_default=True)(fn)
    fn = click.option("--seed", default=0, show_default=True)(fn)
    fn = click.option("--opt-iterations", default=5, show_default=True)(fn)
    return fn


def _config(steps, edit_steps, guidance, seed, opt_iterations) -> DenoiseConfig:
    return DenoiseConfig(
        total_steps=steps,
        edit_steps=edit_steps,
        guidance_scale=guidance,
        seed=seed,
        opt=OptConfig(iterations=opt_iterations),
    )


@main.command()
@click.argument("prompt")
@click.option("--box", required=True, help="left,right,top,bottom fractions")
@click.option("--tokens", required=True, help="1-based token indices, comma separated")
@click.option("--label", default="")
@click.option("--out", type=click.Path(), default=None, help="also write the image PNG here")
@_sampling_options
@click.pass_context
def generate(ctx, prompt, box, tokens, label, out, steps, edit_steps, guidance, seed, opt_iterations):
    """Run one directed generation and persist it."""
    directive = RegionDirective(
        box=_parse_box(box), token_indices=_parse_tokens(tokens), label=label
    )
    record = run_directed_diffusion(
        _backend(ctx), prompt, [directive], _config(steps, edit_steps, guidance, seed, opt_iterations)
    )
    store = _store(ctx)
    store.save(record)
    if out is not None and record.image is not None:
        from PIL import Image

        Image.fromarray(record.image).save(out)
    click.echo(record.run_id)


@main.command()
@click.argument("prompt")
@click.option("--box", required=True)
@click.option("--tokens", required=True)
@click.option("--k", default=12, show_default=True)
@click.option("--seed0", default=0, show_default=True)
@click.option("--sheet", type=click.Path(), default=None, help="contact-sheet PNG path")
@_sampling_options
@click.pass_context
def ssk(ctx, prompt, box, tokens, k, seed0, sheet, steps, edit_steps, guidance, seed, opt_iterations):
    """Generate k runs with consecutive seeds for human selection."""
    directive = RegionDirective(box=_parse_box(box), token_indices=_parse_tokens(tokens))
    store = _store(ctx)
    results = run_ssk(
        _backend(ctx),
        prompt,
        [directive],
        k,
        seed0,
        _config(steps, edit_steps, guidance, seed, opt_iterations),
        store=store,
    )
    for result in results:
        line = f"{result.seed}\t{result.run_id or ''}\t{result.error or 'ok'}"
        click.echo(line)
    if sheet is not None:
        records = {
            r.run_id: store.load(r.run_id) for r in results if r.run_id
        }
        render_seed_contact_sheet(results, records, sheet)


@main.command()
@click.argument("spec_file", type=click.Path(exists=True))
@_sampling_options
@click.pass_context
def compose(ctx, spec_file, steps, edit_steps, guidance, seed, opt_iterations):
    """Blend recorded single-object runs into one scene.

    SPEC_FILE is JSON: {"full_prompt": ..., "sources": [[run_id, weight], ...],
    "edit_steps": N}.
    """
    spec = CompositeSpec.from_json(json.loads(Path(spec_file).read_text()))
    store = _store(ctx)
    sources = [store.load(run_id) for run_id, _ in spec.sources]
    record = run_scene_compositing(
        _backend(ctx), spec, sources, _config(steps, spec.edit_steps, guidance, seed, opt_iterations)
    )
    store.save(record)
    click.echo(record.run_id)


@main.command()
@click.option("--run", "run_id", required=True, help="source run id")
@click.option("--box", required=True)
@click.option("--tokens", required=True)
@click.option("--dx", default=0, show_default=True)
@click.option("--dy", default=0, show_default=True)
@click.option("--edit-steps", default=10, show_default=True)
@click.option("--threshold", default=0.5, show_default=True)
@click.pass_context
def pf(ctx, run_id, box, tokens, dx, dy, edit_steps, threshold):
    """Move an object in a recorded run by a cyclic latent translation."""
    store = _store(ctx)
    source = store.load(run_id)
    directive = RegionDirective(box=_parse_box(box), token_indices=_parse_tokens(tokens))
    record = run_placement_finetune(
        _backend(ctx),
        source,
        directive,
        Translation(dx, dy),
        edit_steps=edit_steps,
        threshold_fraction=threshold,
    )
    store.save(record)
    click.echo(record.run_id)


@main.command()
@click.argument("prompt")
@click.option("--box", required=True)
@click.option("--tokens", required=True)
@click.option("--m-values", default="5,10,15,20", show_default=True)
@click.option("--n-values", default="1,3,5,10,15", show_default=True)
@click.option("--sheet", type=click.Path(), default=None)
@_sampling_options
@click.pass_context
def ablate(ctx, prompt, box, tokens, m_values, n_values, sheet, steps, edit_steps, guidance, seed, opt_iterations):
    """Direct-injection ablation over trailing-count × editing-steps."""
    directive = RegionDirective(box=_parse_box(box), token_indices=_parse_tokens(tokens))
    store = _store(ctx)
    grid = ablation_grid(
        _backend(ctx),
        prompt,
        directive,
        _parse_tokens(m_values),
        _parse_tokens(n_values),
        _config(steps, edit_steps, guidance, seed, opt_iterations),
        store=store,
    )
    for row in grid:
        for cell in row:
            click.echo(
                f"{cell.num_trailing}\t{cell.edit_steps}\t{cell.run_id or ''}\t{cell.error or 'ok'}"
            )
    if sheet is not None:
        records = {
            c.run_id: store.load(c.run_id)
            for row in grid
            for c in row
            if c.run_id
        }
        render_ablation_contact_sheet(grid, records, sheet)


@main.command()
@click.option("--run", "run_ids", multiple=True, required=True, help="run id (repeatable)")
@click.option("--out-dir", type=click.Path(), default="report", show_default=True)
@click.pass_context
def diag(ctx, run_ids, out_dir):
    """Write a gradient-norm CSV plus diagnostic figures for given runs."""
    store = _store(ctx)
    records = [store.load(run_id) for run_id in run_ids]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    csv_path = out / "gradient_norms.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run_id", "step", "latent_step_norm"])
        for record in records:
            for step, value in enumerate(gradient_norm_trace(record)):
                writer.writerow([record.run_id, step, f"{value:.9g}"])

    edit_steps = records[0].config.edit_steps
    render_gradient_norm_figure(records, out / "gradient_norms.png", edit_steps)
    for record in records:
        if record.loss_trace:
            render_loss_trace_figure(record, out / f"losses_{record.run_id}.png")
    click.echo(str(csv_path))


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
@click.pass_context
def serve(ctx, host, port):
    """Run the HTTP service over the selected backend and store."""
    import uvicorn

    from .service import create_app

    app = create_app(ctx.obj["store_root"], backend_config={"backend": ctx.obj["backend"]})
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main(sys.argv[1:])
