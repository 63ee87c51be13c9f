"""HTTP facade for the generation pipeline: a FastAPI app exposing a
job queue (one generation running at a time per backend) plus read-only
run resources (manifest, image, attention heatmaps, loss traces).
"""

from __future__ import annotations

import io
import itertools
import json
import queue
import threading
import time
import uuid
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal

import numpy as np
from fastapi import FastAPI, HTTPException, Response
from fastapi.middleware.cors import CORSMiddleware
from PIL import Image
from pydantic import BaseModel, Field, model_validator

from .attention import OptConfig
from .backend import DiffusionBackend, make_backend
from .compose import CompositeSpec, run_scene_compositing
from .errors import NotFoundError
from .harness import ablation_grid, run_ssk
from .pipeline import DenoiseConfig, RunRecord, run_directed_diffusion
from .placement import Translation, run_placement_finetune
from .regions import BoundingBox, RegionDirective
from .store import RunStore

JobKind = Literal["generate", "ssk", "compose", "pf", "ablate"]
JOB_KINDS: tuple[str, ...] = ("generate", "ssk", "compose", "pf", "ablate")


# --------------------------------------------------------------------------
# Payload schemas
# --------------------------------------------------------------------------


class BoxPayload(BaseModel):
    left: float = Field(ge=0.0, le=1.0)
    right: float = Field(ge=0.0, le=1.0)
    top: float = Field(ge=0.0, le=1.0)
    bottom: float = Field(ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _ordered(self):
        if not self.left < self.right:
            raise ValueError("left must be strictly less than right")
        if not self.top < self.bottom:
            raise ValueError("top must be strictly less than bottom")
        return self

    def to_box(self) -> BoundingBox:
        return BoundingBox(self.left, self.right, self.top, self.bottom)


class DirectivePayload(BaseModel):
    box: BoxPayload
    token_indices: list[int] = Field(min_length=1)
    label: str = ""

    @model_validator(mode="after")
    def _positive_tokens(self):
        if any(i < 1 for i in self.token_indices):
            raise ValueError("token indices are 1-based and must be positive")
        return self

    def to_directive(self) -> RegionDirective:
        return RegionDirective(
            box=self.box.to_box(),
            token_indices=tuple(self.token_indices),
            label=self.label,
        )


class SamplingPayload(BaseModel):
    total_steps: int = Field(default=50, ge=1)
    edit_steps: int = Field(default=10, ge=0)
    guidance_scale: float = 7.5
    seed: int = 0
    opt_iterations: int = Field(default=5, ge=1)

    def to_config(self) -> DenoiseConfig:
        return DenoiseConfig(
            total_steps=self.total_steps,
            edit_steps=self.edit_steps,
            guidance_scale=self.guidance_scale,
            seed=self.seed,
            opt=OptConfig(iterations=self.opt_iterations),
        )


class GeneratePayload(SamplingPayload):
    prompt: str = Field(min_length=1)
    directives: list[DirectivePayload] = Field(min_length=1)


class SskPayload(SamplingPayload):
    prompt: str = Field(min_length=1)
    directives: list[DirectivePayload] = Field(min_length=1)
    k: int = Field(default=12, ge=1)
    seed0: int = 0


class ComposeSourcePayload(BaseModel):
    run_id: str = Field(min_length=1)
    weight: float = Field(ge=0.0, le=1.0)


class ComposePayload(SamplingPayload):
    full_prompt: str = Field(min_length=1)
    sources: list[ComposeSourcePayload] = Field(min_length=1)


class PfPayload(BaseModel):
    run_id: str = Field(min_length=1)
    directive: DirectivePayload
    dx: int = 0
    dy: int = 0
    edit_steps: int = Field(default=10, ge=0)
    threshold_fraction: float = Field(default=0.5, gt=0.0, le=1.0)


class AblatePayload(SamplingPayload):
    prompt: str = Field(min_length=1)
    directive: DirectivePayload
    m_values: list[int] = Field(default=[5, 10, 15, 20], min_length=1)
    n_values: list[int] = Field(default=[1, 3, 5, 10, 15], min_length=1)


PAYLOAD_SCHEMAS: dict[str, type[BaseModel]] = {
    "generate": GeneratePayload,
    "ssk": SskPayload,
    "compose": ComposePayload,
    "pf": PfPayload,
    "ablate": AblatePayload,
}


# --------------------------------------------------------------------------
# Job queue
# --------------------------------------------------------------------------


@dataclass
class Job:
    job_id: str
    kind: str
    payload: BaseModel
    status: str = "queued"  # queued -> running -> done | failed
    queue_position: int = 0
    run_ids: list[str] = field(default_factory=list)
    error: str | None = None

    def to_json(self) -> dict:
        return {
            "job_id": self.job_id,
            "kind": self.kind,
            "status": self.status,
            "queue_position": self.queue_position,
            "run_ids": list(self.run_ids),
            "error": self.error,
        }


class JobWorker:
    """Single worker thread draining a FIFO queue; at most one job runs
    against the backend at any moment.
    """

    def __init__(self, backend: DiffusionBackend, store: RunStore):
        self.backend = backend
        self.store = store
        self.jobs: dict[str, Job] = {}
        self._queue: queue.Queue[Job | None] = queue.Queue()
        self._lock = threading.Lock()
        self._counter = itertools.count(1)
        self._done = threading.Condition(self._lock)
        self._running_count = 0
        self.max_observed_running = 0
        self._thread = threading.Thread(target=self._loop, daemon=True)
        self._thread.start()

    def submit(self, kind: str, payload: BaseModel) -> Job:
        job = Job(job_id=uuid.uuid4().hex[:12], kind=kind, payload=payload)
        with self._lock:
            job.queue_position = next(self._counter)
            self.jobs[job.job_id] = job
        self._queue.put(job)
        return job

    def get(self, job_id: str) -> Job | None:
        with self._lock:
            return self.jobs.get(job_id)

    def wait(self, job_id: str, timeout: float) -> Job | None:
        deadline = time.monotonic() + timeout
        with self._done:
            job = self.jobs.get(job_id)
            while job is not None and job.status in ("queued", "running"):
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    break
                self._done.wait(remaining)
                job = self.jobs.get(job_id)
            return job

    def shutdown(self) -> None:
        self._queue.put(None)
        self._thread.join(timeout=5)

    def _loop(self) -> None:
        while True:
            job = self._queue.get()
            if job is None:
                return
            with self._done:
                job.status = "running"
                self._running_count += 1
                self.max_observed_running = max(
                    self.max_observed_running, self._running_count
                )
            try:
                run_ids = self._execute(job)
                with self._done:
                    job.run_ids = run_ids
                    job.status = "done"
            except Exception as exc:  # per-job failure must not kill the worker
                with self._done:
                    job.status = "failed"
                    job.error = f"{type(exc).__name__}: {exc}"
            finally:
                with self._done:
                    self._running_count -= 1
                    self._done.notify_all()

    def _execute(self, job: Job) -> list[str]:
        payload = job.payload
        if job.kind == "generate":
            record = run_directed_diffusion(
                self.backend,
                payload.prompt,
                [d.to_directive() for d in payload.directives],
                payload.to_config(),
            )
            self.store.save(record)
            return [record.run_id]
        if job.kind == "ssk":
            results = run_ssk(
                self.backend,
                payload.prompt,
                [d.to_directive() for d in payload.directives],
                payload.k,
                payload.seed0,
                payload.to_config(),
                store=self.store,
            )
            return [r.run_id for r in results if r.run_id]
        if job.kind == "compose":
            sources = [(s.run_id, s.weight) for s in payload.sources]
            spec = CompositeSpec(
                full_prompt=payload.full_prompt,
                sources=sources,
                edit_steps=payload.edit_steps,
            )
            records = [self.store.load(rid) for rid, _ in sources]
            record = run_scene_compositing(
                self.backend, spec, records, payload.to_config()
            )
            self.store.save(record)
            return [record.run_id]
        if job.kind == "pf":
            source = self.store.load(payload.run_id)
            record = run_placement_finetune(
                self.backend,
                source,
                payload.directive.to_directive(),
                Translation(payload.dx, payload.dy),
                edit_steps=payload.edit_steps,
                threshold_fraction=payload.threshold_fraction,
            )
            self.store.save(record)
            return [record.run_id]
        if job.kind == "ablate":
            grid = ablation_grid(
                self.backend,
                payload.prompt,
                payload.directive.to_directive(),
                tuple(payload.m_values),
                tuple(payload.n_values),
                payload.to_config(),
                store=self.store,
            )
            return [c.run_id for row in grid for c in row if c.run_id]
        raise ValueError(f"unknown job kind {job.kind!r}")


# --------------------------------------------------------------------------
# App factory
# --------------------------------------------------------------------------


def _png_response(array: np.ndarray) -> Response:
    buf = io.BytesIO()
    Image.fromarray(array).save(buf, format="PNG")
    return Response(content=buf.getvalue(), media_type="image/png")


def attention_heatmap(record: RunRecord, token_index: int, upsample: int = 8) -> np.ndarray:
    """Grayscale heatmap of the final-step attention for one token slot,
    min-max normalized per image, nearest-neighbour upsampled for display.
    """
    maps = record.final_attention
    if maps is None:
        raise NotFoundError("run has no captured attention")
    from .attention import TOKEN_SLOTS

    if not 1 <= token_index <= TOKEN_SLOTS:
        raise ValueError("token index out of range")
    best = max(maps.resolution(layer_id) for layer_id in maps.layers)
    layer_ids = [l for l in maps.layers if maps.resolution(l) == best]
    acc = None
    for layer_id in layer_ids:
        grid = maps.head_mean(layer_id)[:, token_index - 1].reshape(best, best)
        acc = grid if acc is None else acc + grid
    heat = (acc / len(layer_ids)).detach().cpu().numpy()
    lo, hi = float(heat.min()), float(heat.max())
    if hi > lo:
        heat = (heat - lo) / (hi - lo)
    else:
        heat = np.zeros_like(heat)
    gray = (heat * 255.0).round().astype(np.uint8)
    return np.repeat(np.repeat(gray, upsample, axis=0), upsample, axis=1)


def create_app(
    store_root: str | Path,
    backend: DiffusionBackend | None = None,
    backend_config: dict | None = None,
) -> FastAPI:
    if backend is None:
        backend = make_backend(backend_config or {"backend": "toy"})
    store = RunStore(store_root)
    worker = JobWorker(backend, store)

    app = FastAPI(title="directed-diffusion service")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )
    app.state.worker = worker
    app.state.store = store
    app.state.backend = backend

    @app.post("/jobs/{kind}", status_code=202)
    def submit_job(kind: str, payload: dict):
        schema = PAYLOAD_SCHEMAS.get(kind)
        if schema is None:
            raise HTTPException(status_code=400, detail=f"unknown job kind {kind!r}")
        try:
            parsed = schema.model_validate(payload)
        except Exception as exc:
            from pydantic import ValidationError as PydanticValidationError

            if isinstance(exc, PydanticValidationError):
                detail = [
                    {
                        "field": ".".join(str(p) for p in err["loc"]),
                        "message": err["msg"],
                    }
                    for err in exc.errors()
                ]
                raise HTTPException(status_code=422, detail=detail)
            raise
        job = worker.submit(kind, parsed)
        return {"job_id": job.job_id, "queue_position": job.queue_position}

    @app.get("/jobs/{job_id}")
    def fetch_job(job_id: str, timeout: float = 0.0):
        job = worker.wait(job_id, timeout) if timeout > 0 else worker.get(job_id)
        if job is None:
            raise HTTPException(status_code=404, detail=f"unknown job {job_id!r}")
        return job.to_json()

    def _load(run_id: str) -> RunRecord:
        try:
            return store.load(run_id)
        except NotFoundError as exc:
            raise HTTPException(status_code=404, detail=str(exc))

    @app.get("/runs/{run_id}")
    def fetch_run(run_id: str):
        return _load(run_id).manifest()

    @app.get("/runs/{run_id}/image")
    def fetch_image(run_id: str):
        record = _load(run_id)
        if record.image is None:
            raise HTTPException(status_code=404, detail="run has no image")
        return _png_response(record.image)

    @app.get("/runs/{run_id}/attention/{token_index}")
    def fetch_attention(run_id: str, token_index: int):
        record = _load(run_id)
        try:
            heat = attention_heatmap(record, token_index)
        except NotFoundError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        except ValueError as exc:
            raise HTTPException(
                status_code=422,
                detail=[{"field": "token_index", "message": str(exc)}],
            )
        return _png_response(heat)

    @app.get("/runs/{run_id}/losses")
    def fetch_losses(run_id: str):
        record = _load(run_id)
        lines = [
            json.dumps(entry)
            for step_entries in record.loss_trace
            for entry in step_entries
        ]
        return Response(content="\n".join(lines), media_type="application/jsonlines")

    @app.get("/tokens")
    def fetch_tokens(prompt: str):
        tokenize = getattr(backend, "tokenize", None)
        if tokenize is None:
            raise HTTPException(status_code=400, detail="backend has no tokenizer")
        tokens = tokenize(prompt)
        return {"prompt": prompt, "tokens": tokens}

    return app
