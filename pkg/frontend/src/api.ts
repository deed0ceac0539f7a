// Typed client for the refinement service. Masks travel as base64 PNG in
// JSON responses; raw PNG bytes come from the masks endpoint.

import type { PatchGridInfo, PatchRect } from "./patches.js";

export type MaskName = "auto" | "highrecall" | "stage2" | "stage3" | "final";
export type Strategy = "sum" | "mfm";

export interface SessionResponse {
  id: string;
  patch_grid: PatchGridInfo;
  strategy: Strategy;
  masks: Record<MaskName, string>;
}

export interface RefineResponse {
  id: string;
  strategy: Strategy;
  history_length: number;
  noop?: boolean;
  affected_patches: PatchRect[];
  masks: Record<MaskName, string>;
}

export class ApiError extends Error {
  constructor(
    public status: number,
    message: string,
  ) {
    super(message);
  }
}

async function check(res: Response): Promise<any> {
  if (!res.ok) {
    const text = await res.text().catch(() => "");
    throw new ApiError(res.status, `${res.status}: ${text}`);
  }
  return res.json();
}

export class RefinementClient {
  constructor(private base: string = "") {}

  async createSession(image: Blob, filename = "upload.png"): Promise<SessionResponse> {
    const form = new FormData();
    form.append("image", image, filename);
    return check(await fetch(`${this.base}/sessions`, { method: "POST", body: form }));
  }

  async refine(
    sessionId: string,
    positives: Array<[number, number]>,
    negatives: Array<[number, number]>,
    strategy: Strategy = "sum",
    reset = false,
  ): Promise<RefineResponse> {
    return check(
      await fetch(`${this.base}/sessions/${sessionId}/refine`, {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify({ positives, negatives, strategy, reset }),
      }),
    );
  }

  async undo(sessionId: string): Promise<RefineResponse> {
    return check(await fetch(`${this.base}/sessions/${sessionId}/undo`, { method: "POST" }));
  }

  async maskBytes(sessionId: string, which: MaskName): Promise<Uint8Array> {
    const res = await fetch(`${this.base}/sessions/${sessionId}/masks/${which}`);
    if (!res.ok) {
      throw new ApiError(res.status, `${res.status}: ${await res.text().catch(() => "")}`);
    }
    return new Uint8Array(await res.arrayBuffer());
  }

  async health(): Promise<{ status: string; sessions: number }> {
    return check(await fetch(`${this.base}/healthz`));
  }
}

export function decodeBase64(b64: string): Uint8Array {
  if (typeof Buffer !== "undefined") {
    return new Uint8Array(Buffer.from(b64, "base64"));
  }
  const raw = atob(b64);
  const out = new Uint8Array(raw.length);
  for (let i = 0; i < raw.length; i++) {
    out[i] = raw.charCodeAt(i);
  }
  return out;
}
