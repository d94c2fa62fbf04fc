// Class color palette, mirroring the render service formula exactly:
// hue = (i * 0.618034) mod 1, s = 0.72, v = 0.95, HSV -> RGB, rounded.

export function classColor(index: number): [number, number, number] {
  const s = 0.72;
  const v = 0.95;
  const h6 = ((index * 0.618034) % 1.0) * 6.0;
  const k = Math.floor(h6) % 6;
  const f = h6 - Math.floor(h6);
  const p = v * (1 - s);
  const q = v * (1 - s * f);
  const t = v * (1 - s * (1 - f));
  const rgb: [number, number, number][] = [
    [v, t, p], [q, v, p], [p, v, t], [p, q, v], [t, p, v], [v, p, q],
  ];
  const [r, g, b] = rgb[k];
  return [Math.round(r * 255), Math.round(g * 255), Math.round(b * 255)];
}

export function classPalette(numClasses: number): [number, number, number][] {
  return Array.from({ length: numClasses }, (_, i) => classColor(i));
}

/** Exact palette-color -> class-index lookup keyed by packed RGB. */
export function paletteIndex(numClasses: number): Map<number, number> {
  const map = new Map<number, number>();
  classPalette(numClasses).forEach(([r, g, b], i) => {
    map.set((r << 16) | (g << 8) | b, i);
  });
  return map;
}
