"""Fractional bounding boxes, rasterization, and strengthen/weaken mask builders.

Masks are plain float64 numpy arrays of shape (n, n), indexed [y][x].
All builders are pure: identical inputs give bit-identical outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box as unitless fractions of the image extent."""

    left: float
    right: float
    top: float
    bottom: float

    def __post_init__(self):
        if not all(
            isinstance(v, (int, float)) and math.isfinite(v)
            for v in (self.left, self.right, self.top, self.bottom)
        ):
            raise ValidationError("box coordinates must be finite numbers")
        if not (0.0 <= self.left < self.right <= 1.0):
            raise ValidationError(
                f"box requires 0 <= left < right <= 1, got left={self.left}, right={self.right}"
            )
        if not (0.0 <= self.top < self.bottom <= 1.0):
            raise ValidationError(
                f"box requires 0 <= top < bottom <= 1, got top={self.top}, bottom={self.bottom}"
            )

    @property
    def width(self) -> float:
        return self.right - self.left

    @property
    def height(self) -> float:
        return self.bottom - self.top

    def to_json(self) -> dict:
        return {
            "left": self.left,
            "right": self.right,
            "top": self.top,
            "bottom": self.bottom,
        }

    @classmethod
    def from_json(cls, data: dict) -> "BoundingBox":
        try:
            return cls(
                left=data["left"],
                right=data["right"],
                top=data["top"],
                bottom=data["bottom"],
            )
        except KeyError as exc:
            raise ValidationError(f"box JSON missing field {exc}") from exc


@dataclass(frozen=True)
class RegionDirective:
    """A bounding box bound to the 1-based prompt token indices it directs."""

    box: BoundingBox
    token_indices: tuple[int, ...]
    label: str = ""

    def __post_init__(self):
        indices = tuple(int(i) for i in self.token_indices)
        if not indices:
            raise ValidationError("directive needs at least one token index")
        if len(set(indices)) != len(indices):
            raise ValidationError(f"token indices must be distinct, got {indices}")
        if any(i < 1 for i in indices):
            raise ValidationError(f"token indices are 1-based, got {indices}")
        object.__setattr__(self, "token_indices", indices)

    def validate_against_prompt(self, prompt_length: int) -> None:
        for i in self.token_indices:
            if i > prompt_length:
                raise ValidationError(
                    f"token index {i} exceeds prompt length {prompt_length}"
                )

    def to_json(self) -> dict:
        return {
            "box": self.box.to_json(),
            "token_indices": list(self.token_indices),
            "label": self.label,
        }

    @classmethod
    def from_json(cls, data: dict) -> "RegionDirective":
        try:
            return cls(
                box=BoundingBox.from_json(data["box"]),
                token_indices=tuple(data["token_indices"]),
                label=data.get("label", ""),
            )
        except KeyError as exc:
            raise ValidationError(f"directive JSON missing field {exc}") from exc


def box_pixel_bounds(box: BoundingBox, resolution: int) -> tuple[int, int, int, int]:
    """Half-open pixel bounds (x0, x1, y0, y1) of the box at the given resolution.

    Uses [floor(lo*n), ceil(hi*n)) so adjacent boxes sharing an edge never
    double-count a pixel row/column.
    """
    if resolution < 1:
        raise ValidationError(f"resolution must be >= 1, got {resolution}")
    n = int(resolution)
    x0 = math.floor(box.left * n)
    x1 = min(math.ceil(box.right * n), n)
    y0 = math.floor(box.top * n)
    y1 = min(math.ceil(box.bottom * n), n)
    return x0, x1, y0, y1


def rasterize_box(box: BoundingBox, resolution: int) -> np.ndarray:
    """Boolean (n, n) grid marking the pixels inside the box."""
    n = int(resolution)
    x0, x1, y0, y1 = box_pixel_bounds(box, n)
    grid = np.zeros((n, n), dtype=bool)
    grid[y0:y1, x0:x1] = True
    return grid


def gaussian_window(box_width_px: int, box_height_px: int) -> np.ndarray:
    """Separable Gaussian of shape (b_h, b_w) with peak 1 at the continuous center.

    Sigmas are half the box extent; samples sit at integer coordinates relative
    to center ((b_w-1)/2, (b_h-1)/2). No truncation or renormalization.
    """
    b_w, b_h = int(box_width_px), int(box_height_px)
    if b_w < 1 or b_h < 1:
        raise ValidationError(f"window size must be positive, got {b_w}x{b_h}")
    sigma_x = b_w / 2.0
    sigma_y = b_h / 2.0
    xs = np.arange(b_w, dtype=np.float64) - (b_w - 1) / 2.0
    ys = np.arange(b_h, dtype=np.float64) - (b_h - 1) / 2.0
    gx = np.exp(-(xs**2) / (2.0 * sigma_x**2))
    gy = np.exp(-(ys**2) / (2.0 * sigma_y**2))
    return np.outer(gy, gx)


def weaken_mask(box: BoundingBox, resolution: int, c: float) -> np.ndarray:
    """(n, n) mask: 1 inside the rasterized box, the attenuation constant c outside."""
    if not (0.0 <= c <= 1.0):
        raise ValidationError(f"weaken constant must lie in [0, 1], got {c}")
    inside = rasterize_box(box, resolution)
    mask = np.full(inside.shape, float(c), dtype=np.float64)
    mask[inside] = 1.0
    return mask


def strengthen_mask(box: BoundingBox, resolution: int, amplitude: float) -> np.ndarray:
    """(n, n) mask: amplitude-scaled Gaussian window inside the box, 0 outside."""
    if amplitude < 0.0:
        raise ValidationError(f"strengthen amplitude must be >= 0, got {amplitude}")
    n = int(resolution)
    x0, x1, y0, y1 = box_pixel_bounds(box, n)
    mask = np.zeros((n, n), dtype=np.float64)
    mask[y0:y1, x0:x1] = amplitude * gaussian_window(x1 - x0, y1 - y0)
    return mask
