// Orbit/fly camera state and its conversion to a render request.
//
// World convention matches the render service: camera +x right, +y down,
// +z forward; the synthetic rooms use a y-down world, so world-up is -y.

import type { Meta, RenderRequest } from "./types.js";

export interface ViewerState {
  target: [number, number, number];
  radius: number;
  azimuth: number; // radians
  elevation: number; // radians, positive looks from above (world -y side)
  flyOffset: [number, number, number];
  query: string;
  overlayAlpha: number;
  meta: Meta | null;
}

export function initialState(): ViewerState {
  return {
    target: [0, 0, 0],
    radius: 1.2,
    azimuth: 0,
    elevation: 0,
    flyOffset: [0, 0, 0],
    query: "",
    overlayAlpha: 0.5,
    meta: null,
  };
}

function sub(a: number[], b: number[]): number[] {
  return [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
}

function cross(a: number[], b: number[]): number[] {
  return [
    a[1] * b[2] - a[2] * b[1],
    a[2] * b[0] - a[0] * b[2],
    a[0] * b[1] - a[1] * b[0],
  ];
}

function norm(a: number[]): number {
  return Math.hypot(a[0], a[1], a[2]);
}

function scale(a: number[], s: number): number[] {
  return [a[0] * s, a[1] * s, a[2] * s];
}

export function cameraPosition(state: ViewerState): [number, number, number] {
  const { target, radius, azimuth, elevation, flyOffset } = state;
  // azimuth 0, elevation 0 -> camera at target + (0, 0, -radius), looking +z.
  const offset = [
    -radius * Math.sin(azimuth) * Math.cos(elevation),
    -radius * Math.sin(elevation),
    -radius * Math.cos(azimuth) * Math.cos(elevation),
  ];
  return [
    target[0] + offset[0] + flyOffset[0],
    target[1] + offset[1] + flyOffset[1],
    target[2] + offset[2] + flyOffset[2],
  ];
}

/** World-to-camera matrix rows for a camera at `pos` looking at `lookAt`.
 * Mirrors the trainer's look-at: image-up maps to world -y (y-down world). */
export function lookAtW2C(pos: number[], lookAt: number[]): number[] {
  const fwdRaw = sub(lookAt, pos);
  const fn = norm(fwdRaw);
  if (fn < 1e-12) throw new Error("camera position equals its target");
  const fwd = scale(fwdRaw, 1 / fn);
  const up = [0, -1, 0]; // world-up in the y-down scene convention
  // down = -up + (up . fwd) fwd, normalized
  const d = up[0] * fwd[0] + up[1] * fwd[1] + up[2] * fwd[2];
  let down = [-up[0] + d * fwd[0], -up[1] + d * fwd[1], -up[2] + d * fwd[2]];
  const dn = norm(down);
  if (dn < 1e-9) {
    // Looking straight along world up/down: pick a stable fallback frame.
    down = Math.abs(fwd[2]) < 0.9 ? [0, 0, 1] : [1, 0, 0];
    const dd = down[0] * fwd[0] + down[1] * fwd[1] + down[2] * fwd[2];
    down = [down[0] - dd * fwd[0], down[1] - dd * fwd[1], down[2] - dd * fwd[2]];
    const n2 = norm(down);
    down = scale(down, 1 / n2);
  } else {
    down = scale(down, 1 / dn);
  }
  const right = cross(down, fwd);
  const r = right, dw = down, f = fwd, p = pos;
  const tx = -(r[0] * p[0] + r[1] * p[1] + r[2] * p[2]);
  const ty = -(dw[0] * p[0] + dw[1] * p[1] + dw[2] * p[2]);
  const tz = -(f[0] * p[0] + f[1] * p[1] + f[2] * p[2]);
  return [
    r[0], r[1], r[2], tx,
    dw[0], dw[1], dw[2], ty,
    f[0], f[1], f[2], tz,
    0, 0, 0, 1,
  ];
}

const VERTICAL_FOV = (60 * Math.PI) / 180;

export function poseToRequest(state: ViewerState): RenderRequest {
  if (!state.meta) throw new Error("meta not loaded");
  const [width, height] = state.meta.image_size;
  const pos = cameraPosition(state);
  const lookAt = [
    state.target[0] + state.flyOffset[0],
    state.target[1] + state.flyOffset[1],
    state.target[2] + state.flyOffset[2],
  ];
  const f = height / (2 * Math.tan(VERTICAL_FOV / 2));
  const req: RenderRequest = {
    w2c: lookAtW2C(pos, lookAt),
    fx: f,
    fy: f,
    cx: width / 2,
    cy: height / 2,
    width,
    height,
    overlay_alpha: state.overlayAlpha,
  };
  if (state.query.trim()) req.query = state.query.trim();
  return req;
}

/** Max |R R^T - I| of the rotation block; orthonormality diagnostic. */
export function rotationError(w2c: number[]): number {
  const r = [
    [w2c[0], w2c[1], w2c[2]],
    [w2c[4], w2c[5], w2c[6]],
    [w2c[8], w2c[9], w2c[10]],
  ];
  let worst = 0;
  for (let i = 0; i < 3; i++) {
    for (let j = 0; j < 3; j++) {
      let dot = 0;
      for (let k = 0; k < 3; k++) dot += r[i][k] * r[j][k];
      worst = Math.max(worst, Math.abs(dot - (i === j ? 1 : 0)));
    }
  }
  return worst;
}
