/**
 * Canvas-space geometry: converting pixel rectangles and drag vectors into
 * the fractional boxes and integer latent translations the service expects.
 */

export interface PixelRect {
  x0: number;
  y0: number;
  x1: number;
  y1: number;
}

export interface FractionalBox {
  left: number;
  right: number;
  top: number;
  bottom: number;
}

export interface LatentTranslation {
  dx: number;
  dy: number;
}

const clamp01 = (v: number): number => Math.min(1, Math.max(0, v));

/**
 * Convert a drawn pixel rectangle into a fractional bounding box, clamping
 * to [0, 1] so drags past the canvas edge stick to the border.
 *
 * Returns null for degenerate rectangles (zero width or height after
 * normalization), which the UI rejects inline at draw time.
 */
export function normalizeBox(
  rect: PixelRect,
  canvasSize: number,
): FractionalBox | null {
  if (!(canvasSize > 0)) {
    throw new RangeError(`canvas size must be positive, got ${canvasSize}`);
  }
  const left = clamp01(Math.min(rect.x0, rect.x1) / canvasSize);
  const right = clamp01(Math.max(rect.x0, rect.x1) / canvasSize);
  const top = clamp01(Math.min(rect.y0, rect.y1) / canvasSize);
  const bottom = clamp01(Math.max(rect.y0, rect.y1) / canvasSize);
  if (left >= right || top >= bottom) {
    return null;
  }
  return { left, right, top, bottom };
}

/**
 * Scale a pixel drag vector to integer latent pixels.
 *
 * Returns null when both components round to zero (no request is sent; the
 * UI shows an inline hint instead). Offsets are clamped strictly below the
 * latent size in magnitude, matching the translation bounds the service
 * enforces for cyclic shifts.
 */
export function pfDragToRequest(
  drag: { dxPx: number; dyPx: number },
  canvasSize: number,
  latentSize: number,
): LatentTranslation | null {
  if (!(canvasSize > 0) || !(latentSize > 0)) {
    throw new RangeError("canvas and latent sizes must be positive");
  }
  const scale = latentSize / canvasSize;
  const limit = latentSize - 1;
  const clampLatent = (v: number): number =>
    Math.min(limit, Math.max(-limit, Math.round(v * scale)));
  const dx = clampLatent(drag.dxPx);
  const dy = clampLatent(drag.dyPx);
  if (dx === 0 && dy === 0) {
    return null;
  }
  return { dx, dy };
}
