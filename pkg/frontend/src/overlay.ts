/** Mask-to-pixels helpers, kept pure so they are testable without a DOM. */

export type Rgba = [number, number, number, number];

export const MASK_FILL: Rgba = [64, 160, 255, 96];
export const MASK_EDGE: Rgba = [16, 96, 224, 255];

/** 1 where a positive pixel touches a zero or the image border (4-neighborhood). */
export function contour(mask: Uint8Array, width: number, height: number): Uint8Array {
  const out = new Uint8Array(mask.length);
  for (let y = 0; y < height; y++) {
    for (let x = 0; x < width; x++) {
      const i = y * width + x;
      if (!mask[i]) continue;
      const edge =
        x === 0 || y === 0 || x === width - 1 || y === height - 1 ||
        !mask[i - 1] || !mask[i + 1] || !mask[i - width] || !mask[i + width];
      if (edge) out[i] = 1;
    }
  }
  return out;
}

/** Semi-transparent fill with an opaque contour, as RGBA bytes. */
export function maskToRgba(
  mask: Uint8Array,
  width: number,
  height: number,
  fill: Rgba = MASK_FILL,
  edgeColor: Rgba = MASK_EDGE,
): Uint8ClampedArray<ArrayBuffer> {
  const edge = contour(mask, width, height);
  const out = new Uint8ClampedArray(mask.length * 4);
  for (let i = 0; i < mask.length; i++) {
    const src = edge[i] ? edgeColor : mask[i] ? fill : null;
    if (src) {
      out[i * 4] = src[0];
      out[i * 4 + 1] = src[1];
      out[i * 4 + 2] = src[2];
      out[i * 4 + 3] = src[3];
    }
  }
  return out;
}
