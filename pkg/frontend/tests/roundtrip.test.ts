/** End-to-end drive of a live session service.
 *
 * Trains a small checkpoint, starts `guidedseg serve`, and walks the
 * scripted annotator session: create with three video frames, positive
 * click makes a mask appear, negative click changes it, scrubbing to an
 * unannotated frame shows a propagated mask. Also checks that the RLE
 * and PNG mask encodings agree pixel for pixel and that the client's
 * point mirror stays in sync with the server through an undo.
 *
 * Needs the `guidedseg` CLI on PATH; the suite spawns its own server on
 * a pid-derived port.
 */

import { execFileSync, spawn, type ChildProcess } from "node:child_process";
import { existsSync, mkdtempSync, readFileSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import * as path from "node:path";
import { fileURLToPath } from "node:url";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import { decodeRle } from "../src/rle.js";
import { SessionStore } from "../src/state.js";
import { decodePng } from "./png.js";

const PORT = 8700 + (process.pid % 200);
const BASE = `http://127.0.0.1:${PORT}`;
const FRONTEND = fileURLToPath(new URL("..", import.meta.url));

let tmp: string;
let server: ChildProcess | null = null;
let serverLog = "";
let frames: string[] = []; // base64 PNG per frame
let labels: Uint8Array; // instance ids for frame 0
let width = 0;
let height = 0;

const api = new ApiClient(BASE);
const store = new SessionStore(api);

function run(args: string[]): void {
  execFileSync("guidedseg", args, { stdio: "pipe" });
}

/** Pixels of `want` that survive the most rounds of 4-neighbor erosion. */
function interiorPixel(map: Uint8Array, w: number, h: number,
                       want: (v: number) => boolean): { x: number; y: number } {
  let cur = new Uint8Array(map.length);
  for (let i = 0; i < map.length; i++) cur[i] = want(map[i]) ? 1 : 0;
  let last = cur;
  for (;;) {
    const next = new Uint8Array(cur.length);
    let any = 0;
    for (let y = 1; y < h - 1; y++) {
      for (let x = 1; x < w - 1; x++) {
        const i = y * w + x;
        if (cur[i] && cur[i - 1] && cur[i + 1] && cur[i - w] && cur[i + w]) {
          next[i] = 1;
          any = 1;
        }
      }
    }
    if (!any) break;
    last = next;
    cur = next;
  }
  const i = last.indexOf(1);
  if (i < 0) throw new Error("no pixel matches the predicate");
  return { x: i % w, y: Math.floor(i / w) };
}

function countOnes(mask: Uint8Array): number {
  let n = 0;
  for (const v of mask) n += v;
  return n;
}

async function waitForServer(child: ChildProcess): Promise<void> {
  const deadline = Date.now() + 30_000;
  while (Date.now() < deadline) {
    if (child.exitCode !== null) {
      throw new Error(`server exited early (${child.exitCode}):\n${serverLog}`);
    }
    try {
      await fetch(`${BASE}/v1/sessions/probe`);
      return; // any HTTP response means the port is up
    } catch {
      await new Promise((r) => setTimeout(r, 200));
    }
  }
  throw new Error(`server not reachable after 30s:\n${serverLog}`);
}

beforeAll(async () => {
  tmp = mkdtempSync(path.join(tmpdir(), "annotator-"));
  const data = path.join(tmp, "data");
  const ckpt = path.join(tmp, "model.npz");
  run(["synth", "--out", data, "--seed", "11", "--images", "48",
       "--video-sequences", "4"]);
  run(["train", "--data", data, "--out", ckpt, "--episodes", "400",
       "--seed", "0"]);

  // three frames of one video sequence, plus the label map for clicks
  const index = JSON.parse(readFileSync(path.join(data, "index.json"), "utf8"));
  const seq = index.samples
    .filter((s: { sequence: number | null }) => s.sequence === 0)
    .sort((a: { frame: number }, b: { frame: number }) => a.frame - b.frame)
    .slice(0, 3);
  expect(seq.length).toBe(3);
  frames = seq.map((s: { image: string }) =>
    readFileSync(path.join(data, s.image)).toString("base64"));
  const lab = decodePng(readFileSync(path.join(data, seq[0].labels)));
  expect(lab.channels).toBe(1);
  labels = lab.data;
  width = lab.width;
  height = lab.height;

  // the served page is the compiled bundle; build it if absent
  if (!existsSync(path.join(FRONTEND, "dist", "index.html"))) {
    execFileSync("tsc", ["-p", path.join(FRONTEND, "tsconfig.json")], { stdio: "pipe" });
    execFileSync("node", ["-e",
      "require('fs').copyFileSync(process.argv[1], process.argv[2])",
      path.join(FRONTEND, "index.html"),
      path.join(FRONTEND, "dist", "index.html")], { stdio: "pipe" });
  }

  server = spawn("guidedseg",
    ["serve", "--ckpt", ckpt, "--addr", `127.0.0.1:${PORT}`,
     "--static", path.join(FRONTEND, "dist")],
    { stdio: ["ignore", "pipe", "pipe"] });
  server.stdout!.on("data", (b) => { serverLog += b; });
  server.stderr!.on("data", (b) => { serverLog += b; });
  await waitForServer(server);
}, 240_000);

afterAll(async () => {
  if (server && server.exitCode === null) {
    server.kill("SIGTERM");
    await new Promise((r) => server!.once("exit", r));
  }
  rmSync(tmp, { recursive: true, force: true });
});

describe("live session round trip", () => {
  let firstMask: Uint8Array;

  it("creates a session from three frames", async () => {
    await store.create(frames);
    expect(store.frameCount).toBe(3);
    expect(store.width).toBe(width);
    expect(store.height).toBe(height);
  }, 60_000);

  it("shows a mask after one positive click", async () => {
    // deep interior of the first annotated instance, clicked at 2x zoom
    const ids = new Set(labels.filter((v) => v > 0));
    const fgId = Math.min(...ids);
    const fg = interiorPixel(labels, width, height, (v) => v === fgId);
    await store.clickToAnnotate(fg.x * 2, fg.y * 2, 2, true);
    expect(store.mask).not.toBeNull();
    expect(store.mask!.frame).toBe(0);
    expect(store.mask!.degenerate).toBe(false);
    expect(countOnes(store.mask!.data)).toBeGreaterThan(0);
    expect(store.mask!.data[fg.y * width + fg.x]).toBe(1);
    firstMask = Uint8Array.from(store.mask!.data);
  }, 60_000);

  it("changes the mask after one negative click", async () => {
    // a negative is a correction, so aim it at predicted-positive spill:
    // another instance first, then background spill, then the object itself
    const ids = new Set(labels.filter((v) => v > 0));
    const fgId = Math.min(...ids);
    const spills: Array<(i: number) => boolean> = [
      (i) => firstMask[i] === 1 && labels[i] > 0 && labels[i] !== fgId,
      (i) => firstMask[i] === 1 && labels[i] === 0,
      (i) => firstMask[i] === 1,
    ];
    let target: { x: number; y: number } | null = null;
    for (const pred of spills) {
      const region = new Uint8Array(firstMask.length);
      for (let i = 0; i < region.length; i++) region[i] = pred(i) ? 1 : 0;
      if (region.includes(1)) {
        target = interiorPixel(region, width, height, (v) => v === 1);
        break;
      }
    }
    expect(target).not.toBeNull();
    await store.clickToAnnotate(target!.x * 2, target!.y * 2, 2, false);
    expect(store.mask!.frame).toBe(0);
    expect(Buffer.from(store.mask!.data).equals(Buffer.from(firstMask))).toBe(false);
  }, 60_000);

  it("propagates a mask to an unannotated frame on scrub", async () => {
    await store.scrub(2);
    expect(store.activeFrame).toBe(2);
    expect(store.mask!.frame).toBe(2);
    expect(store.mask!.degenerate).toBe(false);
    expect(countOnes(store.mask!.data)).toBeGreaterThan(0);
    expect(store.pointsFor(2)).toEqual([]);
  }, 60_000);

  it("serves identical masks as RLE and as PNG", async () => {
    const sid = store.sessionId!;
    for (let f = 0; f < 3; f++) {
      const r = await api.getMask(sid, f);
      const fromRle = decodeRle(r.mask_rle, r.height, r.width);
      const png = decodePng(new Uint8Array(await api.getMaskPng(sid, f)));
      expect(png.channels).toBe(1);
      expect(png.width).toBe(r.width);
      expect(png.height).toBe(r.height);
      const scaled = Buffer.from(fromRle.map((v) => v * 255));
      expect(Buffer.from(png.data).equals(scaled)).toBe(true);
    }
  }, 60_000);

  it("keeps the point mirror in sync through an undo", async () => {
    expect(await store.reconcile()).toBe(true);
    await store.scrub(0);
    await store.undo(); // drops the negative point, re-posts the positive
    expect(store.pointsFor(0).length).toBe(1);
    expect(store.pointsFor(0)[0].label).toBe("+");
    expect(await store.reconcile()).toBe(true);
    const s = await api.summary(store.sessionId!);
    expect(s.annotations).toEqual({ "0": 1 });
    // same support set as after the first click, so the same mask bytes
    expect(Buffer.from(store.mask!.data).equals(Buffer.from(firstMask))).toBe(true);
  }, 60_000);

  it("serves the annotator page from --static", async () => {
    const page = await fetch(`${BASE}/`);
    expect(page.ok).toBe(true);
    expect(await page.text()).toContain('<script type="module" src="./main.js">');
    const js = await fetch(`${BASE}/main.js`);
    expect(js.ok).toBe(true);
  }, 60_000);
});
