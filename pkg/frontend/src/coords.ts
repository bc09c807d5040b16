/** Canvas-to-image coordinate mapping.
 *
 * The canvas shows the image at an integer or fractional zoom; clicks
 * arrive in displayed pixels and the server wants native pixels. The
 * mapping is floor(displayed / scale), clamped into the image, so a
 * click anywhere inside a magnified pixel lands on that pixel.
 */

export interface PixelPos {
  x: number;
  y: number;
}

export function displayToNative(
  dispX: number,
  dispY: number,
  scale: number,
  width: number,
  height: number,
): PixelPos {
  if (scale <= 0 || !Number.isFinite(scale)) {
    throw new Error(`scale must be a positive number, got ${scale}`);
  }
  const clamp = (v: number, hi: number) => Math.min(Math.max(v, 0), hi);
  return {
    x: clamp(Math.floor(dispX / scale), width - 1),
    y: clamp(Math.floor(dispY / scale), height - 1),
  };
}

/** Scale that fits `width` native pixels into `maxDisplay` displayed ones. */
export function fitScale(width: number, height: number, maxDisplay: number): number {
  const s = maxDisplay / Math.max(width, height);
  return s >= 1 ? Math.floor(s) : s;
}
