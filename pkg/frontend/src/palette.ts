/**
 * Deterministic class palette shared with the studio service.
 *
 * Index 0 stays black (the unpainted, normal class). Painted classes
 * take colors spaced around the hue wheel by the golden-ratio
 * conjugate, so class ids map to the same visually distinct colors in
 * every session and match the palette the service writes into label
 * pngs.
 */

const HUE_STEP = 0.61803398875;
const SATURATION = 0.72;
const VALUE = 0.96;

/** Flat 256-entry RGB palette (768 bytes) covering the given class count. */
export function classPalette(numClasses: number): Uint8Array {
  const palette = new Uint8Array(256 * 3);
  const top = Math.max(numClasses, 1);
  for (let k = 1; k <= top; k += 1) {
    const hue = ((k - 1) * HUE_STEP) % 1.0;
    const [r, g, b] = hsvToRgb(hue, SATURATION, VALUE);
    palette[3 * k] = r;
    palette[3 * k + 1] = g;
    palette[3 * k + 2] = b;
  }
  return palette;
}

/** RGB color (0..255 each) of one class id under the shared palette. */
export function classColor(classId: number, numClasses: number): [number, number, number] {
  if (!Number.isInteger(classId) || classId < 0 || classId > 255) {
    throw new RangeError(`class id must be an integer in [0, 255], got ${classId}`);
  }
  const palette = classPalette(numClasses);
  return [palette[3 * classId], palette[3 * classId + 1], palette[3 * classId + 2]];
}

function hsvToRgb(h: number, s: number, v: number): [number, number, number] {
  const face = Math.trunc(h * 6.0) % 6;
  const f = h * 6.0 - Math.trunc(h * 6.0);
  const p = v * (1 - s);
  const q = v * (1 - s * f);
  const t = v * (1 - s * (1 - f));
  const faces: [number, number, number][] = [
    [v, t, p],
    [q, v, p],
    [p, v, t],
    [p, q, v],
    [t, p, v],
    [v, p, q],
  ];
  const [r, g, b] = faces[face];
  return [roundHalfToEven(255 * r), roundHalfToEven(255 * g), roundHalfToEven(255 * b)];
}

/**
 * Round a non-negative value half-to-even, matching the rounding the
 * service applies when it builds the same palette.
 */
function roundHalfToEven(x: number): number {
  const nearest = Math.round(x);
  if (x % 1 === 0.5 && nearest % 2 === 1) {
    return nearest - 1;
  }
  return nearest;
}
