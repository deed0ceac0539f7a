// Patch arithmetic mirroring the server's grid exactly. Coordinates are
// (row, col) with origin top-left; canvas clicks convert at the boundary.

export interface PatchGridInfo {
  l_h: number;
  l_w: number;
  rows: number;
  cols: number;
  height: number;
  width: number;
}

export interface PatchRect {
  i: number;
  j: number;
  row0: number;
  row1: number;
  col0: number;
  col1: number;
}

export function patchOf(h: number, w: number, grid: PatchGridInfo): { i: number; j: number } {
  if (h < 0 || w < 0 || h >= grid.height || w >= grid.width) {
    throw new Error(`point (h=${h}, w=${w}) outside image ${grid.height}x${grid.width}`);
  }
  return { i: Math.floor(h / grid.l_h), j: Math.floor(w / grid.l_w) };
}

export function patchRect(i: number, j: number, grid: PatchGridInfo): PatchRect {
  if (i < 0 || j < 0 || i >= grid.rows || j >= grid.cols) {
    throw new Error(`patch (${i}, ${j}) outside grid ${grid.rows}x${grid.cols}`);
  }
  return {
    i,
    j,
    row0: i * grid.l_h,
    row1: Math.min((i + 1) * grid.l_h, grid.height),
    col0: j * grid.l_w,
    col1: Math.min((j + 1) * grid.l_w, grid.width),
  };
}

export function rectForPoint(h: number, w: number, grid: PatchGridInfo): PatchRect {
  const { i, j } = patchOf(h, w, grid);
  return patchRect(i, j, grid);
}

// Canvas (x, y) in display pixels -> image (row, col), or null outside the image.
export function canvasToImage(
  x: number,
  y: number,
  grid: PatchGridInfo,
  scale: number,
): { h: number; w: number } | null {
  const h = Math.floor(y / scale);
  const w = Math.floor(x / scale);
  if (h < 0 || w < 0 || h >= grid.height || w >= grid.width) {
    return null;
  }
  return { h, w };
}

export function samePatchSet(a: PatchRect[], b: PatchRect[]): boolean {
  const key = (r: PatchRect) => `${r.i},${r.j},${r.row0},${r.row1},${r.col0},${r.col1}`;
  const sa = new Set(a.map(key));
  const sb = new Set(b.map(key));
  return sa.size === sb.size && [...sa].every((k) => sb.has(k));
}
