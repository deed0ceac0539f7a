// Canvas rendering: base image, tinted mask layers (hatched for the
// high-recall reference), patch-grid lines, prompt markers, and the
// highlight rectangle of the most recent interaction.

import type { MaskName } from "./api.js";
import type { PatchGridInfo, PatchRect } from "./patches.js";
import type { PendingPrompt, ViewState } from "./state.js";

export const POSITIVE_COLOR = "#19c24a"; // green markers: positive prompts
export const NEGATIVE_COLOR = "#e6293c"; // red markers: negative prompts
const FINAL_TINT = "#2979ff";
const HIGHRECALL_TINT = "#ffb300";

export interface RenderInputs {
  image: ImageBitmap | null;
  masks: Partial<Record<MaskName, ImageBitmap>>;
  committedMarkers: PendingPrompt[];
  scale: number;
}

export async function maskToBitmap(bytes: Uint8Array): Promise<ImageBitmap> {
  const copy = new Uint8Array(bytes);
  return createImageBitmap(new Blob([copy.buffer as ArrayBuffer], { type: "image/png" }));
}

function tintedMask(mask: ImageBitmap, color: string, hatched: boolean): HTMLCanvasElement {
  const off = document.createElement("canvas");
  off.width = mask.width;
  off.height = mask.height;
  const ctx = off.getContext("2d")!;
  ctx.drawImage(mask, 0, 0);
  ctx.globalCompositeOperation = "source-in";
  ctx.fillStyle = color;
  ctx.fillRect(0, 0, off.width, off.height);
  if (hatched) {
    ctx.globalCompositeOperation = "source-atop";
    ctx.strokeStyle = "rgba(255,255,255,0.8)";
    ctx.lineWidth = 1;
    for (let d = -off.height; d < off.width; d += 6) {
      ctx.beginPath();
      ctx.moveTo(d, 0);
      ctx.lineTo(d + off.height, off.height);
      ctx.stroke();
    }
  }
  return off;
}

export function render(
  canvas: HTMLCanvasElement,
  state: ViewState,
  inputs: RenderInputs,
  highlight: PatchRect | null,
): void {
  const grid = state.grid;
  const ctx = canvas.getContext("2d")!;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  if (!grid) {
    return;
  }
  const s = inputs.scale;
  ctx.imageSmoothingEnabled = false;

  if (state.layers.image.visible && inputs.image) {
    ctx.globalAlpha = state.layers.image.opacity;
    ctx.drawImage(inputs.image, 0, 0, grid.width * s, grid.height * s);
  }
  if (state.layers.highrecall.visible && inputs.masks.highrecall) {
    ctx.globalAlpha = state.layers.highrecall.opacity;
    ctx.drawImage(
      tintedMask(inputs.masks.highrecall, HIGHRECALL_TINT, true),
      0, 0, grid.width * s, grid.height * s,
    );
  }
  if (state.layers.final.visible && inputs.masks.final) {
    ctx.globalAlpha = state.layers.final.opacity;
    ctx.drawImage(tintedMask(inputs.masks.final, FINAL_TINT, false), 0, 0, grid.width * s, grid.height * s);
  }

  if (state.layers.grid.visible) {
    ctx.globalAlpha = state.layers.grid.opacity;
    ctx.strokeStyle = "rgba(255,255,255,0.6)";
    ctx.lineWidth = 1;
    for (let j = 0; j <= grid.cols; j++) {
      const x = Math.min(j * grid.l_w, grid.width) * s;
      ctx.beginPath();
      ctx.moveTo(x, 0);
      ctx.lineTo(x, grid.height * s);
      ctx.stroke();
    }
    for (let i = 0; i <= grid.rows; i++) {
      const y = Math.min(i * grid.l_h, grid.height) * s;
      ctx.beginPath();
      ctx.moveTo(0, y);
      ctx.lineTo(grid.width * s, y);
      ctx.stroke();
    }
  }

  if (highlight) {
    ctx.globalAlpha = 0.9;
    ctx.strokeStyle = "#ffffff";
    ctx.lineWidth = 2;
    ctx.strokeRect(
      highlight.col0 * s,
      highlight.row0 * s,
      (highlight.col1 - highlight.col0) * s,
      (highlight.row1 - highlight.row0) * s,
    );
  }

  if (state.layers.markers.visible) {
    ctx.globalAlpha = state.layers.markers.opacity;
    const draw = (p: PendingPrompt, committed: boolean) => {
      ctx.fillStyle = p.tool === "positive" ? POSITIVE_COLOR : NEGATIVE_COLOR;
      ctx.strokeStyle = "#ffffff";
      ctx.lineWidth = committed ? 1 : 2;
      ctx.beginPath();
      ctx.arc((p.w + 0.5) * s, (p.h + 0.5) * s, committed ? 4 : 5, 0, 2 * Math.PI);
      ctx.fill();
      ctx.stroke();
    };
    for (const p of inputs.committedMarkers) {
      draw(p, true);
    }
    for (const p of state.pending) {
      draw(p, false);
    }
  }
  ctx.globalAlpha = 1.0;
}

export function fitScale(grid: PatchGridInfo, maxSide: number): number {
  return Math.max(1, Math.floor(maxSide / Math.max(grid.width, grid.height)));
}
