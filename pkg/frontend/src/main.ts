// DOM wiring: upload, tool switching, click-to-prompt, commit/undo, layer
// toggles. One in-flight refine at a time; further commits queue client-side.

import { RefinementClient, type MaskName } from "./api.js";
import { canvasToImage, samePatchSet, type PatchRect } from "./patches.js";
import {
  applySession,
  commit,
  committedPrompts,
  initialState,
  placePrompt,
  setTool,
  toggleLayer,
  undo,
  type LayerKey,
  type PendingPrompt,
  type Tool,
  type ViewState,
} from "./state.js";
import { fitScale, maskToBitmap, render, type RenderInputs } from "./overlay.js";

const api = new RefinementClient("");
let state: ViewState = initialState();
let image: ImageBitmap | null = null;
let maskBitmaps: Partial<Record<MaskName, ImageBitmap>> = {};
let highlight: PatchRect | null = null;
let scale = 4;
let commitChain: Promise<void> = Promise.resolve();

const canvas = document.getElementById("view") as HTMLCanvasElement;
const statusLine = document.getElementById("status") as HTMLElement;

function setStatus(text: string, isError = false) {
  statusLine.textContent = text;
  statusLine.className = isError ? "error" : "";
}

async function refreshBitmaps() {
  const entries = Object.entries(state.maskBytes) as Array<[MaskName, Uint8Array]>;
  const out: Partial<Record<MaskName, ImageBitmap>> = {};
  for (const [name, bytes] of entries) {
    out[name] = await maskToBitmap(bytes);
  }
  maskBitmaps = out;
}

function committedMarkers(): PendingPrompt[] {
  const { positives, negatives } = committedPrompts(state);
  return [
    ...positives.map(([h, w]) => ({ h, w, tool: "positive" as Tool })),
    ...negatives.map(([h, w]) => ({ h, w, tool: "negative" as Tool })),
  ];
}

function paint() {
  if (!state.grid) {
    return;
  }
  canvas.width = state.grid.width * scale;
  canvas.height = state.grid.height * scale;
  const inputs: RenderInputs = {
    image,
    masks: maskBitmaps,
    committedMarkers: committedMarkers(),
    scale,
  };
  render(canvas, state, inputs, highlight);
}

async function onUpload(file: File) {
  setStatus("encoding image...");
  try {
    const resp = await api.createSession(file);
    state = applySession(state, resp);
    scale = fitScale(resp.patch_grid, 768);
    image = await createImageBitmap(file);
    await refreshBitmaps();
    highlight = null;
    setStatus(`session ${resp.id.slice(0, 8)} | ${resp.patch_grid.rows}x${resp.patch_grid.cols} patches`);
    paint();
  } catch (err) {
    setStatus(`upload failed: ${err instanceof Error ? err.message : err}`, true);
  }
}

function onCanvasClick(ev: MouseEvent) {
  if (!state.grid) {
    return;
  }
  const rect = canvas.getBoundingClientRect();
  const pt = canvasToImage(ev.clientX - rect.left, ev.clientY - rect.top, state.grid, scale);
  if (!pt) {
    setStatus("click outside the image ignored", true);
    return;
  }
  const placed = placePrompt(state, pt.h, pt.w);
  if (!placed) {
    return;
  }
  state = placed.state;
  highlight = placed.highlight;
  setStatus(`pending ${state.pending.length} prompt(s); commit to apply`);
  paint();
}

function onCommit() {
  commitChain = commitChain.then(async () => {
    if (state.pending.length === 0) {
      return;
    }
    setStatus("refining...");
    const result = await commit(state, api);
    if (!result) {
      return;
    }
    state = result.state;
    if (state.error) {
      setStatus(`commit failed, prompts retained: ${state.error}`, true);
      return;
    }
    const localRects = result.serverPatches;
    await refreshBitmaps();
    highlight = null;
    const agreement = samePatchSet(localRects, state.lastAffectedPatches) ? "" : " (patch mismatch!)";
    setStatus(`refined; ${localRects.length} patch(es) affected${agreement}`);
    paint();
  });
}

function onUndo() {
  commitChain = commitChain.then(async () => {
    setStatus("undoing...");
    try {
      state = await undo(state, api);
      await refreshBitmaps();
      highlight = null;
      setStatus("undone");
      paint();
    } catch (err) {
      setStatus(`undo failed: ${err instanceof Error ? err.message : err}`, true);
    }
  });
}

function wire() {
  (document.getElementById("file") as HTMLInputElement).addEventListener("change", (ev) => {
    const file = (ev.target as HTMLInputElement).files?.[0];
    if (file) {
      void onUpload(file);
    }
  });
  canvas.addEventListener("click", onCanvasClick);
  (document.getElementById("commit") as HTMLButtonElement).addEventListener("click", onCommit);
  (document.getElementById("undo") as HTMLButtonElement).addEventListener("click", onUndo);
  (document.getElementById("clear-pending") as HTMLButtonElement).addEventListener("click", () => {
    state = { ...state, pending: [] };
    highlight = null;
    setStatus("pending prompts cleared");
    paint();
  });

  for (const tool of ["positive", "negative"] as Tool[]) {
    (document.getElementById(`tool-${tool}`) as HTMLInputElement).addEventListener("change", () => {
      state = setTool(state, tool);
    });
  }

  for (const layer of ["image", "final", "highrecall", "grid", "markers"] as LayerKey[]) {
    const box = document.getElementById(`layer-${layer}`) as HTMLInputElement | null;
    const slider = document.getElementById(`opacity-${layer}`) as HTMLInputElement | null;
    box?.addEventListener("change", () => {
      state = toggleLayer(state, layer, box.checked);
      paint();
    });
    slider?.addEventListener("input", () => {
      state = toggleLayer(state, layer, undefined, Number(slider.value) / 100);
      paint();
    });
  }
}

wire();
setStatus("upload an image to start");
