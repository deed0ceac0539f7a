// View state and its transitions. The server owns the truth: committed
// prompts mirror its history, masks are whatever it last returned, and a
// failed commit keeps the pending set so nothing is silently lost.

import type { MaskName, RefinementClient, SessionResponse, Strategy } from "./api.js";
import { decodeBase64 } from "./api.js";
import type { PatchGridInfo, PatchRect } from "./patches.js";
import { rectForPoint } from "./patches.js";

export type Tool = "positive" | "negative";
export type LayerKey = "image" | "final" | "highrecall" | "grid" | "markers";

export interface PendingPrompt {
  h: number;
  w: number;
  tool: Tool;
}

export interface CommittedDelta {
  positives: Array<[number, number]>;
  negatives: Array<[number, number]>;
}

export interface LayerSetting {
  visible: boolean;
  opacity: number; // [0, 1]
}

export interface ViewState {
  sessionId: string | null;
  grid: PatchGridInfo | null;
  strategy: Strategy;
  tool: Tool;
  pending: PendingPrompt[];
  committed: CommittedDelta[];
  maskBytes: Partial<Record<MaskName, Uint8Array>>;
  layers: Record<LayerKey, LayerSetting>;
  lastAffectedPatches: PatchRect[];
  error: string | null;
  busy: boolean;
}

export function initialState(): ViewState {
  return {
    sessionId: null,
    grid: null,
    strategy: "sum",
    tool: "positive",
    pending: [],
    committed: [],
    maskBytes: {},
    layers: {
      image: { visible: true, opacity: 1.0 },
      final: { visible: true, opacity: 0.55 },
      highrecall: { visible: true, opacity: 0.35 },
      grid: { visible: true, opacity: 0.5 },
      markers: { visible: true, opacity: 1.0 },
    },
    lastAffectedPatches: [],
    error: null,
    busy: false,
  };
}

function decodeMasks(masks: Record<MaskName, string>): Partial<Record<MaskName, Uint8Array>> {
  const out: Partial<Record<MaskName, Uint8Array>> = {};
  for (const name of Object.keys(masks) as MaskName[]) {
    out[name] = decodeBase64(masks[name]);
  }
  return out;
}

export function applySession(state: ViewState, resp: SessionResponse): ViewState {
  return {
    ...state,
    sessionId: resp.id,
    grid: resp.patch_grid,
    strategy: resp.strategy,
    pending: [],
    committed: [],
    maskBytes: decodeMasks(resp.masks),
    lastAffectedPatches: [],
    error: null,
  };
}

export function setTool(state: ViewState, tool: Tool): ViewState {
  return { ...state, tool };
}

export function toggleLayer(state: ViewState, layer: LayerKey, visible?: boolean, opacity?: number): ViewState {
  const current = state.layers[layer];
  const next: LayerSetting = {
    visible: visible ?? current.visible,
    opacity: opacity === undefined ? current.opacity : Math.min(1, Math.max(0, opacity)),
  };
  return { ...state, layers: { ...state.layers, [layer]: next } };
}

// Place a prompt at image coordinates; returns the locally computed patch
// rectangle so the canvas can highlight the influence region immediately.
export function placePrompt(
  state: ViewState,
  h: number,
  w: number,
): { state: ViewState; highlight: PatchRect } | null {
  if (!state.grid) {
    return null;
  }
  if (h < 0 || w < 0 || h >= state.grid.height || w >= state.grid.width) {
    return null; // out-of-image clicks are ignored
  }
  const highlight = rectForPoint(h, w, state.grid);
  const pending = [...state.pending, { h, w, tool: state.tool }];
  return { state: { ...state, pending }, highlight };
}

export function pendingAsDelta(state: ViewState): CommittedDelta {
  return {
    positives: state.pending.filter((p) => p.tool === "positive").map((p) => [p.h, p.w]),
    negatives: state.pending.filter((p) => p.tool === "negative").map((p) => [p.h, p.w]),
  };
}

export function localAffectedPatches(state: ViewState): PatchRect[] {
  if (!state.grid) {
    return [];
  }
  const grid = state.grid;
  const seen = new Map<string, PatchRect>();
  for (const p of state.pending) {
    const rect = rectForPoint(p.h, p.w, grid);
    seen.set(`${rect.i},${rect.j}`, rect);
  }
  return [...seen.values()].sort((a, b) => a.i - b.i || a.j - b.j);
}

export function committedPrompts(state: ViewState): { positives: Array<[number, number]>; negatives: Array<[number, number]> } {
  const positives: Array<[number, number]> = [];
  const negatives: Array<[number, number]> = [];
  for (const delta of state.committed) {
    positives.push(...delta.positives);
    negatives.push(...delta.negatives);
  }
  return { positives, negatives };
}

export async function commit(
  state: ViewState,
  api: RefinementClient,
): Promise<{ state: ViewState; serverPatches: PatchRect[] } | null> {
  if (!state.sessionId || state.pending.length === 0) {
    return null; // nothing pending: no request
  }
  const delta = pendingAsDelta(state);
  try {
    const resp = await api.refine(
      state.sessionId,
      delta.positives,
      delta.negatives,
      state.strategy,
    );
    return {
      state: {
        ...state,
        pending: [],
        committed: [...state.committed, delta],
        maskBytes: decodeMasks(resp.masks),
        lastAffectedPatches: resp.affected_patches,
        error: null,
      },
      serverPatches: resp.affected_patches,
    };
  } catch (err) {
    // server failure: pending retained so the user can retry
    return {
      state: { ...state, error: err instanceof Error ? err.message : String(err) },
      serverPatches: [],
    };
  }
}

export async function undo(state: ViewState, api: RefinementClient): Promise<ViewState> {
  if (!state.sessionId) {
    return state;
  }
  const resp = await api.undo(state.sessionId);
  return {
    ...state,
    committed: resp.noop ? state.committed : state.committed.slice(0, -1),
    maskBytes: decodeMasks(resp.masks),
    lastAffectedPatches: resp.affected_patches,
    error: null,
  };
}
