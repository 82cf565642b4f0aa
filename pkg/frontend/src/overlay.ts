/** Mask overlay rendering: RLE bits to a translucent RGBA layer. */

import type { BboxWire } from "./types.js";

export const MASK_FILL: [number, number, number, number] = [59, 130, 246, 110];
export const HIGHLIGHT_STROKE = "#f59e0b";

export function overlayRgba(
  bits: Uint8Array,
  w: number,
  h: number,
  fill: [number, number, number, number] = MASK_FILL,
): Uint8ClampedArray<ArrayBuffer> {
  if (bits.length !== w * h) {
    throw new Error(`bit count ${bits.length} does not match ${w}x${h}`);
  }
  const rgba = new Uint8ClampedArray(w * h * 4);
  for (let i = 0; i < bits.length; i++) {
    if (bits[i]) {
      rgba[i * 4] = fill[0];
      rgba[i * 4 + 1] = fill[1];
      rgba[i * 4 + 2] = fill[2];
      rgba[i * 4 + 3] = fill[3];
    }
  }
  return rgba;
}

export function paintOverlay(
  ctx: CanvasRenderingContext2D,
  bits: Uint8Array,
  w: number,
  h: number,
): void {
  ctx.clearRect(0, 0, w, h);
  const rgba = overlayRgba(bits, w, h);
  ctx.putImageData(new ImageData(rgba, w, h), 0, 0);
}

export function paintBboxHighlight(ctx: CanvasRenderingContext2D, bbox: BboxWire): void {
  const [x0, y0, x1, y1] = bbox;
  ctx.strokeStyle = HIGHLIGHT_STROKE;
  ctx.lineWidth = 2;
  ctx.strokeRect(x0 + 0.5, y0 + 0.5, x1 - x0 + 1, y1 - y0 + 1);
}

export function clearLayer(ctx: CanvasRenderingContext2D, w: number, h: number): void {
  ctx.clearRect(0, 0, w, h);
}
