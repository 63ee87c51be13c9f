"""Run persistence: one directory per run holding the JSON manifest, the
binary latent trajectory, final attention maps, loss trace, and output image.

Trajectory blob layout (little-endian):
    magic "DDLT" | version u16 | step_count u32 | dims u32 x 4 | f32 payload
Payload is step-major; latents of rank under 4 get leading dims of size 1.
Round-trips are bit-exact for all float payloads.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .attention import CrossAttentionMaps
from .errors import FormatError, NotFoundError, ValidationError
from .pipeline import DenoiseConfig, RunRecord
from .regions import RegionDirective

MAGIC = b"DDLT"
VERSION = 1


def encode_trajectory(latents: list[torch.Tensor]) -> bytes:
    if not latents:
        raise ValidationError("cannot encode an empty trajectory")
    shape = tuple(latents[0].shape)
    if len(shape) > 4:
        raise ValidationError(f"latent rank {len(shape)} exceeds 4")
    dims = (1,) * (4 - len(shape)) + shape
    header = MAGIC + struct.pack("<HI4I", VERSION, len(latents), *dims)
    payload = np.stack(
        [z.detach().cpu().numpy().astype(np.float32, copy=False) for z in latents]
    )
    return header + payload.astype("<f4").tobytes()


def decode_trajectory(blob: bytes) -> list[torch.Tensor]:
    header_size = 4 + struct.calcsize("<HI4I")
    if len(blob) < header_size or blob[:4] != MAGIC:
        raise FormatError("trajectory blob missing DDLT magic")
    version, count, *dims = struct.unpack("<HI4I", blob[4:header_size])
    if version != VERSION:
        raise FormatError(f"unsupported trajectory version {version}")
    per_step = int(np.prod(dims))
    expected = header_size + 4 * count * per_step
    if len(blob) != expected:
        raise FormatError(
            f"trajectory blob has {len(blob)} bytes, expected {expected}"
        )
    data = np.frombuffer(blob, dtype="<f4", offset=header_size).reshape(count, *dims)
    # strip only the leading padding dims
    lead = 0
    for d in dims:
        if d == 1 and lead < 3:
            lead += 1
        else:
            break
    out_shape = dims[lead:]
    return [torch.from_numpy(step.reshape(out_shape).copy()) for step in data]


class RunStore:
    """Append-only directory store indexed by run id."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _run_dir(self, run_id: str) -> Path:
        return self.root / run_id

    def list_runs(self) -> list[str]:
        return sorted(
            p.name for p in self.root.iterdir() if (p / "manifest.json").exists()
        )

    def exists(self, run_id: str) -> bool:
        return (self._run_dir(run_id) / "manifest.json").exists()

    def path(self, run_id: str, name: str) -> Path:
        run_dir = self._run_dir(run_id)
        if not (run_dir / "manifest.json").exists():
            raise NotFoundError(run_id)
        return run_dir / name

    def save(self, record: RunRecord) -> str:
        if self.exists(record.run_id):
            raise ValidationError(f"run id {record.run_id} already stored")
        run_dir = self._run_dir(record.run_id)
        run_dir.mkdir(parents=True)

        (run_dir / "manifest.json").write_text(
            json.dumps(record.manifest(), indent=2)
        )
        (run_dir / "trajectory.bin").write_bytes(encode_trajectory(record.latents))

        if record.final_attention is not None:
            arrays = {
                f"layer__{k}": v.detach().cpu().numpy()
                for k, v in record.final_attention.layers.items()
            }
            arrays["prompt_length"] = np.array(record.final_attention.prompt_length)
            np.savez(run_dir / "attention.npz", **arrays)

        with open(run_dir / "losses.jsonl", "w") as fh:
            for trace in record.loss_trace:
                for entry in trace:
                    fh.write(json.dumps(entry) + "\n")

        if record.image is not None:
            Image.fromarray(record.image).save(run_dir / "image.png")
        return record.run_id

    def load(self, run_id: str) -> RunRecord:
        run_dir = self._run_dir(run_id)
        manifest_path = run_dir / "manifest.json"
        if not manifest_path.exists():
            raise NotFoundError(run_id)
        manifest = json.loads(manifest_path.read_text())

        latents = decode_trajectory((run_dir / "trajectory.bin").read_bytes())

        final_attention = None
        attn_path = run_dir / "attention.npz"
        if attn_path.exists():
            with np.load(attn_path) as npz:
                prompt_length = int(npz["prompt_length"])
                layers = {
                    key[len("layer__"):]: torch.from_numpy(npz[key])
                    for key in npz.files
                    if key.startswith("layer__")
                }
            final_attention = CrossAttentionMaps(
                layers=layers, prompt_length=prompt_length
            )

        loss_by_step: dict[int, list[dict]] = {}
        losses_path = run_dir / "losses.jsonl"
        if losses_path.exists():
            for line in losses_path.read_text().splitlines():
                if line.strip():
                    entry = json.loads(line)
                    loss_by_step.setdefault(entry["step"], []).append(entry)

        image = None
        image_path = run_dir / "image.png"
        if image_path.exists():
            image = np.asarray(Image.open(image_path))

        return RunRecord(
            run_id=manifest["run_id"],
            kind=manifest["kind"],
            config=DenoiseConfig.from_json(manifest["config"]),
            prompt=manifest["prompt"],
            directives=[RegionDirective.from_json(d) for d in manifest["directives"]],
            latents=latents,
            final_attention=final_attention,
            loss_trace=[loss_by_step[k] for k in sorted(loss_by_step)],
            image=image,
            sources=manifest.get("sources", []),
            error=manifest.get("error"),
        )
