/** Run-length codec for binary masks.
 *
 * The wire format is row-major [value, run, value, run, ...] starting at
 * the top-left pixel; runs may cross row boundaries and must cover the
 * mask exactly.
 */

export class RleError extends Error {}

export function decodeRle(rle: number[], height: number, width: number): Uint8Array {
  if (rle.length % 2 !== 0) {
    throw new RleError(`run-length data must be (value, run) pairs, got length ${rle.length}`);
  }
  const total = height * width;
  const out = new Uint8Array(total);
  let at = 0;
  for (let i = 0; i < rle.length; i += 2) {
    const value = rle[i];
    const run = rle[i + 1];
    if (value !== 0 && value !== 1) {
      throw new RleError(`mask values must be 0 or 1, got ${value}`);
    }
    if (!Number.isInteger(run) || run <= 0) {
      throw new RleError(`runs must be positive integers, got ${run}`);
    }
    if (at + run > total) {
      throw new RleError(`runs overflow the ${height}x${width} mask`);
    }
    if (value === 1) {
      out.fill(1, at, at + run);
    }
    at += run;
  }
  if (at !== total) {
    throw new RleError(`runs cover ${at} of ${total} pixels`);
  }
  return out;
}

export function encodeRle(mask: Uint8Array, height: number, width: number): number[] {
  const total = height * width;
  if (mask.length !== total) {
    throw new RleError(`mask has ${mask.length} pixels, expected ${total}`);
  }
  const out: number[] = [];
  let i = 0;
  while (i < total) {
    const value = mask[i];
    if (value !== 0 && value !== 1) {
      throw new RleError(`mask values must be 0 or 1, got ${value}`);
    }
    let j = i + 1;
    while (j < total && mask[j] === value) {
      j++;
    }
    out.push(value, j - i);
    i = j;
  }
  return out;
}
