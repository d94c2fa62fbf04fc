// Client-side overlay compositing: decode the label image's palette colors
// back to class indices and tint the matching pixels of the color frame.
// Doing this client-side lets the overlay alpha change without a re-render.

import { classColor, paletteIndex } from "./palette.js";

export interface Rgba {
  data: Uint8ClampedArray; // RGBA, row-major
  width: number;
  height: number;
}

export function labelsFromImage(label: Rgba, numClasses: number): Int32Array {
  const lookup = paletteIndex(numClasses);
  const out = new Int32Array(label.width * label.height).fill(-1);
  for (let i = 0; i < out.length; i++) {
    const r = label.data[i * 4];
    const g = label.data[i * 4 + 1];
    const b = label.data[i * 4 + 2];
    const idx = lookup.get((r << 16) | (g << 8) | b);
    if (idx !== undefined) out[i] = idx;
  }
  return out;
}

/** Blend a class highlight into the color frame where labels match. */
export function compositeOverlay(
  color: Rgba,
  labels: Int32Array,
  classIndex: number,
  alpha: number,
): Rgba {
  const out = new Uint8ClampedArray(color.data); // copy
  const [hr, hg, hb] = classColor(classIndex);
  for (let i = 0; i < labels.length; i++) {
    if (labels[i] !== classIndex) continue;
    out[i * 4] = Math.round((1 - alpha) * color.data[i * 4] + alpha * hr);
    out[i * 4 + 1] = Math.round((1 - alpha) * color.data[i * 4 + 1] + alpha * hg);
    out[i * 4 + 2] = Math.round((1 - alpha) * color.data[i * 4 + 2] + alpha * hb);
  }
  return { data: out, width: color.width, height: color.height };
}

export function coverage(labels: Int32Array, classIndex: number): number {
  let hits = 0;
  for (let i = 0; i < labels.length; i++) if (labels[i] === classIndex) hits++;
  return hits / Math.max(labels.length, 1);
}
