/** Typed client for the session service HTTP API.
 *
 * All payloads are image-pixel coordinates and base64 PNG or run-length
 * masks; nothing here knows about feature maps.
 */

export interface ClickPoint {
  x: number;
  y: number;
  label: "+" | "-";
}

export interface MaskResponse {
  mask_rle: number[];
  width: number;
  height: number;
  degenerate: boolean;
}

export interface AnnotateResponse extends MaskResponse {
  guidance_ms: number;
  infer_ms: number;
}

export interface CreateResponse {
  session_id: string;
  frames: number;
  feature_stride: number;
}

export interface SessionSummary {
  session_id: string;
  frames: number;
  frame_size: number[];
  annotations: Record<string, number>;
  locality: string;
  degenerate: boolean;
  guidance_ms: number | null;
  infer_ms: number | null;
  created: number;
  updated: number;
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    detail: string,
  ) {
    super(detail);
  }
}

async function reject(r: Response): Promise<never> {
  let detail = r.statusText;
  try {
    const body = await r.json();
    if (typeof body.detail === "string") detail = body.detail;
  } catch {
    /* non-JSON error body; keep the status text */
  }
  throw new ApiError(r.status, detail);
}

export class ApiClient {
  constructor(readonly baseUrl: string = "") {}

  private async post<T>(path: string, body: unknown): Promise<T> {
    const r = await fetch(this.baseUrl + path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
    if (!r.ok) await reject(r);
    return r.json() as Promise<T>;
  }

  createSession(framesPngBase64: string[], locality = "auto"): Promise<CreateResponse> {
    return this.post("/v1/sessions", { frames: framesPngBase64, locality });
  }

  appendFrame(sessionId: string, pngBase64: string): Promise<{ frame: number }> {
    return this.post(`/v1/sessions/${sessionId}/frames`, { image_png_base64: pngBase64 });
  }

  addPoints(sessionId: string, frame: number, points: ClickPoint[]): Promise<AnnotateResponse> {
    return this.post(`/v1/sessions/${sessionId}/annotations`, { frame, points });
  }

  async clearAnnotations(sessionId: string, frame?: number): Promise<void> {
    const qs = frame === undefined ? "" : `?frame=${frame}`;
    const r = await fetch(`${this.baseUrl}/v1/sessions/${sessionId}/annotations${qs}`, {
      method: "DELETE",
    });
    if (!r.ok) await reject(r);
  }

  async getMask(sessionId: string, frame: number): Promise<MaskResponse> {
    const r = await fetch(`${this.baseUrl}/v1/sessions/${sessionId}/mask?frame=${frame}`);
    if (!r.ok) await reject(r);
    return r.json();
  }

  async getMaskPng(sessionId: string, frame: number): Promise<ArrayBuffer> {
    const r = await fetch(
      `${this.baseUrl}/v1/sessions/${sessionId}/mask?frame=${frame}&format=png`,
    );
    if (!r.ok) await reject(r);
    return r.arrayBuffer();
  }

  async summary(sessionId: string): Promise<SessionSummary> {
    const r = await fetch(`${this.baseUrl}/v1/sessions/${sessionId}`);
    if (!r.ok) await reject(r);
    return r.json();
  }
}
