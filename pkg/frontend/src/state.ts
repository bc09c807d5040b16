/** Client-side session state.
 *
 * Holds the mirror of the server's annotation sets (same last-write-wins
 * rule: one point per pixel per frame), the latest mask, and the latency
 * readout. Mutating requests are serialized through a promise chain so at
 * most one is in flight; reads (mask fetches for scrubbing) may overlap.
 *
 * Clicks are optimistic: the dot appears immediately and is rolled back
 * if the server rejects the point.
 */

import { ApiClient, ClickPoint, MaskResponse, SessionSummary } from "./api.js";
import { displayToNative } from "./coords.js";
import { decodeRle } from "./rle.js";

export interface StoredPoint extends ClickPoint {}

export interface MaskState {
  frame: number;
  width: number;
  height: number;
  data: Uint8Array; // decoded, 1 byte per pixel
  degenerate: boolean;
}

export interface Latency {
  guidanceMs: number | null;
  inferMs: number | null;
}

export class SessionStore {
  sessionId: string | null = null;
  frameCount = 0;
  width = 0;
  height = 0;
  activeFrame = 0;
  points = new Map<number, StoredPoint[]>();
  mask: MaskState | null = null;
  latency: Latency = { guidanceMs: null, inferMs: null };
  pendingMutations = 0;

  private chain: Promise<unknown> = Promise.resolve();

  constructor(readonly api: ApiClient) {}

  get pending(): boolean {
    return this.pendingMutations > 0;
  }

  /** Serialize a mutating request behind every earlier one. */
  private enqueue<T>(job: () => Promise<T>): Promise<T> {
    this.pendingMutations++;
    const run = this.chain.then(job);
    this.chain = run.catch(() => undefined);
    return run.finally(() => {
      this.pendingMutations--;
    });
  }

  async create(framesPngBase64: string[], locality = "auto"): Promise<void> {
    const r = await this.api.createSession(framesPngBase64, locality);
    const summary = await this.api.summary(r.session_id);
    this.sessionId = r.session_id;
    this.frameCount = r.frames;
    this.height = summary.frame_size[0]; // server reports (rows, cols)
    this.width = summary.frame_size[1];
    this.activeFrame = 0;
    this.points.clear();
    this.mask = null;
    this.latency = { guidanceMs: null, inferMs: null };
  }

  pointsFor(frame: number): StoredPoint[] {
    return this.points.get(frame) ?? [];
  }

  private requireSession(): string {
    if (this.sessionId === null) {
      throw new Error("no active session");
    }
    return this.sessionId;
  }

  private applyMask(frame: number, r: MaskResponse): void {
    this.mask = {
      frame,
      width: r.width,
      height: r.height,
      data: decodeRle(r.mask_rle, r.height, r.width),
      degenerate: r.degenerate,
    };
  }

  /** Mirror of the server rule: a second point on a pixel replaces the first. */
  private upsertLocal(frame: number, pt: StoredPoint): StoredPoint[] {
    const before = this.pointsFor(frame);
    const kept = before.filter((p) => p.x !== pt.x || p.y !== pt.y);
    kept.push(pt);
    this.points.set(frame, kept);
    return before;
  }

  /** Map a click on the displayed canvas to a native pixel and annotate it. */
  clickToAnnotate(dispX: number, dispY: number, scale: number,
                  positive: boolean): Promise<void> {
    const sid = this.requireSession();
    const frame = this.activeFrame;
    const { x, y } = displayToNative(dispX, dispY, scale, this.width, this.height);
    const pt: StoredPoint = { x, y, label: positive ? "+" : "-" };
    const before = this.upsertLocal(frame, pt); // optimistic dot
    return this.enqueue(async () => {
      try {
        const r = await this.api.addPoints(sid, frame, [pt]);
        this.latency = { guidanceMs: r.guidance_ms, inferMs: r.infer_ms };
        this.applyMask(frame, r);
      } catch (err) {
        this.points.set(frame, before); // server refused: remove the dot
        throw err;
      }
    });
  }

  /** Drop the last point on the active frame and re-post the full set. */
  undo(): Promise<void> {
    const sid = this.requireSession();
    const frame = this.activeFrame;
    const before = this.pointsFor(frame);
    if (before.length === 0) {
      return Promise.resolve();
    }
    const remaining = before.slice(0, -1);
    this.points.set(frame, remaining);
    return this.enqueue(async () => {
      try {
        await this.api.clearAnnotations(sid, frame);
        if (remaining.length > 0) {
          const r = await this.api.addPoints(sid, frame, remaining);
          this.latency = { guidanceMs: r.guidance_ms, inferMs: r.infer_ms };
          this.applyMask(frame, r);
        } else {
          const r = await this.api.getMask(sid, frame);
          this.applyMask(frame, r);
        }
      } catch (err) {
        this.points.set(frame, before);
        throw err;
      }
    });
  }

  clearFrame(frame: number): Promise<void> {
    const sid = this.requireSession();
    const before = this.pointsFor(frame);
    this.points.delete(frame);
    return this.enqueue(async () => {
      try {
        await this.api.clearAnnotations(sid, frame);
        const r = await this.api.getMask(sid, frame);
        this.applyMask(frame, r);
      } catch (err) {
        this.points.set(frame, before);
        throw err;
      }
    });
  }

  /** Read-only: fetch the (possibly propagated) mask for a frame. */
  async scrub(frame: number): Promise<void> {
    const sid = this.requireSession();
    if (frame < 0 || frame >= this.frameCount) {
      throw new Error(`frame ${frame} out of range`);
    }
    this.activeFrame = frame;
    const r = await this.api.getMask(sid, frame);
    this.applyMask(frame, r);
  }

  async appendFrame(pngBase64: string): Promise<number> {
    const sid = this.requireSession();
    return this.enqueue(async () => {
      const r = await this.api.appendFrame(sid, pngBase64);
      this.frameCount = r.frame + 1;
      return r.frame;
    });
  }

  /** Check the local point mirror against the server's per-frame counts. */
  async reconcile(): Promise<boolean> {
    const sid = this.requireSession();
    const summary: SessionSummary = await this.api.summary(sid);
    const local: Record<string, number> = {};
    for (const [frame, pts] of this.points) {
      if (pts.length > 0) local[String(frame)] = pts.length;
    }
    const server = summary.annotations;
    const keys = new Set([...Object.keys(local), ...Object.keys(server)]);
    for (const k of keys) {
      if ((local[k] ?? 0) !== (server[k] ?? 0)) return false;
    }
    return true;
  }
}
