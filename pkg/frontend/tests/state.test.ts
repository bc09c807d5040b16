import { describe, expect, it } from "vitest";

import type {
  AnnotateResponse,
  ApiClient,
  ClickPoint,
  MaskResponse,
  SessionSummary,
} from "../src/api.js";
import { SessionStore } from "../src/state.js";

interface Call {
  kind: string;
  frame?: number;
  points?: ClickPoint[];
}

/** In-memory stand-in for the service with the same annotation rules. */
class FakeApi {
  calls: Call[] = [];
  annotations = new Map<number, Map<string, ClickPoint>>();
  rejectNext = false;
  gate: Promise<void> | null = null;
  frames = 3;
  size = 8;

  private mask(): MaskResponse {
    const n = this.size * this.size;
    return {
      mask_rle: [0, n],
      width: this.size,
      height: this.size,
      degenerate: this.total() === 0,
    };
  }

  private total(): number {
    let t = 0;
    for (const m of this.annotations.values()) t += m.size;
    return t;
  }

  async createSession(): Promise<{ session_id: string; frames: number; feature_stride: number }> {
    this.calls.push({ kind: "create" });
    return { session_id: "abc", frames: this.frames, feature_stride: 4 };
  }

  async appendFrame(): Promise<{ frame: number }> {
    this.calls.push({ kind: "append" });
    this.frames += 1;
    return { frame: this.frames - 1 };
  }

  async addPoints(_sid: string, frame: number, points: ClickPoint[]): Promise<AnnotateResponse> {
    this.calls.push({ kind: "annotate", frame, points });
    if (this.gate) await this.gate;
    if (this.rejectNext) {
      this.rejectNext = false;
      throw new Error("point 0: outside frame");
    }
    const m = this.annotations.get(frame) ?? new Map<string, ClickPoint>();
    for (const p of points) m.set(`${p.x},${p.y}`, p);
    this.annotations.set(frame, m);
    return { ...this.mask(), guidance_ms: 1.5, infer_ms: 2.5 };
  }

  async clearAnnotations(_sid: string, frame?: number): Promise<void> {
    this.calls.push({ kind: "clear", frame });
    if (frame === undefined) this.annotations.clear();
    else this.annotations.delete(frame);
  }

  async getMask(_sid: string, frame: number): Promise<MaskResponse> {
    this.calls.push({ kind: "mask", frame });
    return this.mask();
  }

  async getMaskPng(): Promise<ArrayBuffer> {
    return new ArrayBuffer(0);
  }

  async summary(): Promise<SessionSummary> {
    const ann: Record<string, number> = {};
    for (const [f, m] of this.annotations) {
      if (m.size > 0) ann[String(f)] = m.size;
    }
    return {
      session_id: "abc",
      frames: this.frames,
      frame_size: [this.size, this.size],
      annotations: ann,
      locality: "global_pool",
      degenerate: this.total() === 0,
      guidance_ms: null,
      infer_ms: null,
      created: 0,
      updated: 0,
    };
  }
}

async function makeStore(): Promise<{ store: SessionStore; api: FakeApi }> {
  const api = new FakeApi();
  const store = new SessionStore(api as unknown as ApiClient);
  await store.create(["f0", "f1", "f2"]);
  return { store, api };
}

describe("SessionStore", () => {
  it("reads frame geometry from the summary", async () => {
    const { store } = await makeStore();
    expect(store.frameCount).toBe(3);
    expect(store.width).toBe(8);
    expect(store.height).toBe(8);
  });

  it("places the dot optimistically and keeps it on success", async () => {
    const { store } = await makeStore();
    const job = store.clickToAnnotate(10, 14, 2, true);
    expect(store.pointsFor(0)).toEqual([{ x: 5, y: 7, label: "+" }]);
    expect(store.pending).toBe(true);
    await job;
    expect(store.pending).toBe(false);
    expect(store.latency.guidanceMs).toBe(1.5);
    expect(store.mask?.frame).toBe(0);
    expect(await store.reconcile()).toBe(true);
  });

  it("rolls the dot back when the server rejects it", async () => {
    const { store, api } = await makeStore();
    await store.clickToAnnotate(0, 0, 1, true);
    api.rejectNext = true;
    await expect(store.clickToAnnotate(2, 2, 1, false)).rejects.toThrow("outside");
    expect(store.pointsFor(0)).toEqual([{ x: 0, y: 0, label: "+" }]);
    expect(await store.reconcile()).toBe(true);
  });

  it("replaces a point on the same pixel instead of stacking", async () => {
    const { store } = await makeStore();
    await store.clickToAnnotate(3, 3, 1, true);
    await store.clickToAnnotate(3, 3, 1, false);
    expect(store.pointsFor(0)).toEqual([{ x: 3, y: 3, label: "-" }]);
    expect(await store.reconcile()).toBe(true);
  });

  it("serializes mutating requests", async () => {
    const { store, api } = await makeStore();
    let release!: () => void;
    api.gate = new Promise((res) => {
      release = res;
    });
    const first = store.clickToAnnotate(0, 0, 1, true);
    const second = store.clickToAnnotate(1, 0, 1, true);
    await Promise.resolve();
    // only the first annotate call has been issued while it is in flight
    expect(api.calls.filter((c) => c.kind === "annotate")).toHaveLength(1);
    api.gate = null;
    release();
    await Promise.all([first, second]);
    expect(api.calls.filter((c) => c.kind === "annotate")).toHaveLength(2);
  });

  it("undo drops the last point and re-posts the full remaining set", async () => {
    const { store, api } = await makeStore();
    await store.clickToAnnotate(0, 0, 1, true);
    await store.clickToAnnotate(4, 0, 1, false);
    api.calls.length = 0;
    await store.undo();
    expect(api.calls.map((c) => c.kind)).toEqual(["clear", "annotate"]);
    expect(api.calls[1].points).toEqual([{ x: 0, y: 0, label: "+" }]);
    expect(await store.reconcile()).toBe(true);
  });

  it("undo of the only point clears and refetches", async () => {
    const { store, api } = await makeStore();
    await store.clickToAnnotate(0, 0, 1, true);
    api.calls.length = 0;
    await store.undo();
    expect(api.calls.map((c) => c.kind)).toEqual(["clear", "mask"]);
    expect(store.pointsFor(0)).toEqual([]);
  });

  it("scrubbing issues only reads", async () => {
    const { store, api } = await makeStore();
    await store.clickToAnnotate(0, 0, 1, true);
    api.calls.length = 0;
    await store.scrub(2);
    expect(store.activeFrame).toBe(2);
    expect(store.mask?.frame).toBe(2);
    expect(api.calls.map((c) => c.kind)).toEqual(["mask"]);
  });

  it("rejects out-of-range scrubs", async () => {
    const { store } = await makeStore();
    await expect(store.scrub(3)).rejects.toThrow(/out of range/);
  });
});
