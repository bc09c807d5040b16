/** DOM wiring for the annotator page.
 *
 * Layers, bottom to top: the frame image, the mask overlay, the polarity
 * dots. Left click places a positive point, right click (or shift-click)
 * a negative one; the dot lands immediately and the mask refreshes when
 * the server answers. A range input scrubs frames; scrubbing only reads.
 */

import { ApiClient, ApiError } from "./api.js";
import { fitScale } from "./coords.js";
import { maskToRgba } from "./overlay.js";
import { SessionStore } from "./state.js";

const MAX_DISPLAY = 512;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

const store = new SessionStore(new ApiClient(""));

const fileInput = el<HTMLInputElement>("frames");
const createBtn = el<HTMLButtonElement>("create");
const undoBtn = el<HTMLButtonElement>("undo");
const clearBtn = el<HTMLButtonElement>("clear");
const scrubber = el<HTMLInputElement>("scrubber");
const frameLabel = el<HTMLSpanElement>("frame-label");
const latencyLabel = el<HTMLSpanElement>("latency");
const statusLabel = el<HTMLSpanElement>("status");
const toast = el<HTMLDivElement>("toast");
const stack = el<HTMLDivElement>("stack");
const imageCanvas = el<HTMLCanvasElement>("image-layer");
const maskCanvas = el<HTMLCanvasElement>("mask-layer");
const dotsCanvas = el<HTMLCanvasElement>("dots-layer");

let frameBitmaps: ImageBitmap[] = [];
let scale = 1;

function showToast(text: string): void {
  toast.textContent = text;
  toast.classList.add("visible");
  window.setTimeout(() => toast.classList.remove("visible"), 4000);
}

function setCanvasSizes(): void {
  scale = fitScale(store.width, store.height, MAX_DISPLAY);
  const w = Math.round(store.width * scale);
  const h = Math.round(store.height * scale);
  for (const c of [imageCanvas, maskCanvas, dotsCanvas]) {
    c.width = w;
    c.height = h;
  }
  stack.style.width = `${w}px`;
  stack.style.height = `${h}px`;
}

function drawFrame(): void {
  const ctx = imageCanvas.getContext("2d")!;
  ctx.imageSmoothingEnabled = false;
  ctx.clearRect(0, 0, imageCanvas.width, imageCanvas.height);
  const bmp = frameBitmaps[store.activeFrame];
  if (bmp) ctx.drawImage(bmp, 0, 0, imageCanvas.width, imageCanvas.height);
}

function drawMask(): void {
  const ctx = maskCanvas.getContext("2d")!;
  ctx.imageSmoothingEnabled = false;
  ctx.clearRect(0, 0, maskCanvas.width, maskCanvas.height);
  const m = store.mask;
  if (!m || m.frame !== store.activeFrame) return;
  const rgba = maskToRgba(m.data, m.width, m.height);
  const off = new OffscreenCanvas(m.width, m.height);
  const octx = off.getContext("2d")!;
  octx.putImageData(new ImageData(rgba, m.width, m.height), 0, 0);
  ctx.drawImage(off, 0, 0, maskCanvas.width, maskCanvas.height);
  statusLabel.textContent = m.degenerate ? "mask ignores annotations (none yet)" : "";
}

function drawDots(): void {
  const ctx = dotsCanvas.getContext("2d")!;
  ctx.clearRect(0, 0, dotsCanvas.width, dotsCanvas.height);
  for (const pt of store.pointsFor(store.activeFrame)) {
    ctx.beginPath();
    ctx.arc((pt.x + 0.5) * scale, (pt.y + 0.5) * scale, 4, 0, 2 * Math.PI);
    ctx.fillStyle = pt.label === "+" ? "#2ecc40" : "#ff4136";
    ctx.fill();
    ctx.lineWidth = 1.5;
    ctx.strokeStyle = "#111";
    ctx.stroke();
  }
}

function drawLatency(): void {
  const { guidanceMs, inferMs } = store.latency;
  latencyLabel.textContent =
    guidanceMs === null
      ? "latency: -"
      : `latency: guidance ${guidanceMs.toFixed(1)} ms, infer ${inferMs?.toFixed(1)} ms`;
}

function redraw(): void {
  drawFrame();
  drawMask();
  drawDots();
  drawLatency();
  frameLabel.textContent = `frame ${store.activeFrame + 1} / ${store.frameCount}`;
  scrubber.max = String(Math.max(store.frameCount - 1, 0));
  scrubber.value = String(store.activeFrame);
  scrubber.disabled = store.frameCount < 2;
}

async function fileToB64(file: File): Promise<{ b64: string; bmp: ImageBitmap }> {
  const buf = await file.arrayBuffer();
  const bytes = new Uint8Array(buf);
  let bin = "";
  for (const b of bytes) bin += String.fromCharCode(b);
  return { b64: btoa(bin), bmp: await createImageBitmap(new Blob([buf])) };
}

createBtn.addEventListener("click", async () => {
  const files = Array.from(fileInput.files ?? []);
  if (files.length === 0) {
    showToast("choose one or more PNG frames first");
    return;
  }
  try {
    const loaded = await Promise.all(files.map(fileToB64));
    frameBitmaps = loaded.map((l) => l.bmp);
    await store.create(loaded.map((l) => l.b64));
    setCanvasSizes();
    await store.scrub(0);
    redraw();
  } catch (err) {
    showToast(err instanceof ApiError ? `server: ${err.message}` : String(err));
  }
});

dotsCanvas.addEventListener("contextmenu", (ev) => ev.preventDefault());

dotsCanvas.addEventListener("mousedown", async (ev) => {
  if (store.sessionId === null) return;
  const rect = dotsCanvas.getBoundingClientRect();
  const positive = ev.button === 0 && !ev.shiftKey;
  const job = store.clickToAnnotate(
    ev.clientX - rect.left,
    ev.clientY - rect.top,
    scale,
    positive,
  );
  drawDots(); // optimistic
  try {
    await job;
  } catch (err) {
    showToast(err instanceof ApiError ? `rejected: ${err.message}` : String(err));
  }
  redraw();
});

undoBtn.addEventListener("click", async () => {
  try {
    await store.undo();
  } catch (err) {
    showToast(String(err));
  }
  redraw();
});

clearBtn.addEventListener("click", async () => {
  try {
    await store.clearFrame(store.activeFrame);
  } catch (err) {
    showToast(String(err));
  }
  redraw();
});

scrubber.addEventListener("input", async () => {
  try {
    await store.scrub(Number(scrubber.value));
  } catch (err) {
    showToast(String(err));
  }
  redraw();
});

redraw();
