// Viewer UI: orbit/WASD camera, free-text class queries, overlay controls.

import { initialState, poseToRequest, ViewerState } from "./camera.js";
import { RenderClient } from "./client.js";
import { classPalette } from "./palette.js";
import { compositeOverlay, labelsFromImage, Rgba } from "./overlay.js";
import type { RenderResponse } from "./types.js";

const state: ViewerState = initialState();
let lastResponse: RenderResponse | null = null;
let lastLabels: Int32Array | null = null;
let lastColor: Rgba | null = null;

const $ = (id: string) => document.getElementById(id)!;
const colorCanvas = $("color") as HTMLCanvasElement;
const labelCanvas = $("label") as HTMLCanvasElement;
const overlayCanvas = $("overlay") as HTMLCanvasElement;
const banner = $("banner") as HTMLDivElement;
const queryBox = $("query") as HTMLInputElement;
const alphaSlider = $("alpha") as HTMLInputElement;
const legend = $("legend") as HTMLDivElement;
const classList = $("classes") as HTMLDataListElement;

const base = (new URLSearchParams(location.search).get("server")
  ?? `http://${location.hostname}:8090`).replace(/\/$/, "");

const client = new RenderClient(base, {
  onFrame: (resp) => void showFrame(resp),
  onError: (message) => {
    banner.textContent = message;
    banner.style.display = "block";
    clearCanvas(overlayCanvas); // unresolved query clears the previous overlay
  },
});

function clearCanvas(c: HTMLCanvasElement) {
  c.getContext("2d")!.clearRect(0, 0, c.width, c.height);
}

async function decode(b64: string): Promise<Rgba> {
  const img = new Image();
  img.src = `data:image/png;base64,${b64}`;
  await img.decode();
  const c = document.createElement("canvas");
  c.width = img.width;
  c.height = img.height;
  const ctx = c.getContext("2d")!;
  ctx.drawImage(img, 0, 0);
  const data = ctx.getImageData(0, 0, img.width, img.height);
  return { data: data.data, width: img.width, height: img.height };
}

function paint(canvas: HTMLCanvasElement, rgba: Rgba) {
  canvas.width = rgba.width;
  canvas.height = rgba.height;
  const ctx = canvas.getContext("2d")!;
  const copy = new Uint8ClampedArray(rgba.data.length);
  copy.set(rgba.data);
  ctx.putImageData(new ImageData(copy, rgba.width, rgba.height), 0, 0);
}

async function showFrame(resp: RenderResponse) {
  banner.style.display = "none";
  lastResponse = resp;
  lastColor = await decode(resp.color_png_b64);
  paint(colorCanvas, lastColor);
  const label = await decode(resp.label_png_b64);
  paint(labelCanvas, label);
  lastLabels = labelsFromImage(label, state.meta?.classes.length ?? 0);
  repaintOverlay();
}

function repaintOverlay() {
  if (!lastColor || !lastLabels || !lastResponse) return;
  if (lastResponse.query_class_index === undefined) {
    clearCanvas(overlayCanvas);
    return;
  }
  const out = compositeOverlay(lastColor, lastLabels,
    lastResponse.query_class_index, state.overlayAlpha);
  paint(overlayCanvas, out);
}

function requestRender() {
  if (!state.meta) return;
  client.request(poseToRequest(state));
}

function buildLegend() {
  if (!state.meta) return;
  const palette = classPalette(state.meta.classes.length);
  legend.innerHTML = "";
  classList.innerHTML = "";
  state.meta.classes.forEach((name, i) => {
    const li = document.createElement("div");
    const [r, g, b] = palette[i];
    li.innerHTML = `<span style="display:inline-block;width:12px;height:12px;` +
      `background:rgb(${r},${g},${b});margin-right:6px"></span>${name}`;
    legend.appendChild(li);
    const opt = document.createElement("option");
    opt.value = name;
    classList.appendChild(opt);
  });
}

function bindControls() {
  let dragging = false;
  let lastX = 0;
  let lastY = 0;
  colorCanvas.addEventListener("mousedown", (e) => {
    dragging = true;
    lastX = e.clientX;
    lastY = e.clientY;
  });
  window.addEventListener("mouseup", () => (dragging = false));
  window.addEventListener("mousemove", (e) => {
    if (!dragging) return;
    state.azimuth += (e.clientX - lastX) * 0.01;
    state.elevation = Math.max(-1.4, Math.min(1.4,
      state.elevation + (e.clientY - lastY) * 0.01));
    lastX = e.clientX;
    lastY = e.clientY;
    requestRender();
  });
  colorCanvas.addEventListener("wheel", (e) => {
    e.preventDefault();
    state.radius = Math.max(0.1, state.radius * (e.deltaY > 0 ? 1.1 : 0.9));
    requestRender();
  });
  window.addEventListener("keydown", (e) => {
    const step = 0.1;
    const az = state.azimuth;
    const fwd = [Math.sin(az), 0, Math.cos(az)];
    const right = [fwd[2], 0, -fwd[0]];
    const move: Record<string, number[]> = {
      w: fwd, s: fwd.map((v) => -v),
      a: right.map((v) => -v), d: right,
      q: [0, -step * 10, 0], e: [0, step * 10, 0],
    };
    const m = move[e.key.toLowerCase()];
    if (!m || document.activeElement === queryBox) return;
    state.flyOffset = [
      state.flyOffset[0] + m[0] * step,
      state.flyOffset[1] + m[1] * step * 0.1,
      state.flyOffset[2] + m[2] * step,
    ];
    requestRender();
  });
  queryBox.addEventListener("input", () => {
    state.query = queryBox.value;
    requestRender();
  });
  alphaSlider.addEventListener("input", () => {
    state.overlayAlpha = Number(alphaSlider.value) / 100;
    repaintOverlay(); // client-side recomposite, no server round trip
  });
}

async function start() {
  try {
    state.meta = await client.fetchMeta();
  } catch (e) {
    banner.textContent = `cannot reach server at ${base}: ${(e as Error).message}`;
    banner.style.display = "block";
    return;
  }
  buildLegend();
  bindControls();
  await client.send(poseToRequest(state));
}

void start();
