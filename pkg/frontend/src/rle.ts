/**
 * Run-length mask codec, bit-for-bit compatible with the engine:
 * row-major scan, alternating runs starting with a zero-run (the leading
 * count may be 0), counts summing to exactly w*h.
 */

import type { RleJson } from "./types.js";

export function decodeRle(rle: RleJson): Uint8Array {
  const { w, h, counts } = rle;
  if (!Number.isInteger(w) || !Number.isInteger(h) || w < 1 || h < 1) {
    throw new Error(`invalid RLE dims ${w}x${h}`);
  }
  let total = 0;
  for (let i = 0; i < counts.length; i++) {
    const c = counts[i];
    if (!Number.isInteger(c) || c < 0) {
      throw new Error(`invalid run length ${c}`);
    }
    if (c === 0 && i > 0) {
      throw new Error("zero-length interior run");
    }
    total += c;
  }
  if (total !== w * h) {
    throw new Error(`counts sum ${total} does not cover ${w}x${h}`);
  }
  const bits = new Uint8Array(w * h);
  let offset = 0;
  let value = 0;
  for (const c of counts) {
    if (value === 1) {
      bits.fill(1, offset, offset + c);
    }
    offset += c;
    value = 1 - value;
  }
  return bits;
}

export function encodeRle(bits: Uint8Array, w: number, h: number): RleJson {
  if (bits.length !== w * h) {
    throw new Error(`bit count ${bits.length} does not match ${w}x${h}`);
  }
  const counts: number[] = [];
  let current = 0;
  let run = 0;
  for (const bit of bits) {
    const v = bit ? 1 : 0;
    if (v === current) {
      run += 1;
    } else {
      counts.push(run);
      current = v;
      run = 1;
    }
  }
  counts.push(run);
  return { w, h, counts };
}
