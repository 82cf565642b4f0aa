import { readFileSync } from "node:fs";
import { join } from "node:path";

import { describe, expect, it } from "vitest";

import { decodeRle, encodeRle } from "../src/rle.js";
import type { RleJson } from "../src/types.js";

interface FixtureCase {
  name: string;
  rle: RleJson;
  bits: string;
}

const fixtures: FixtureCase[] = JSON.parse(
  readFileSync(join(__dirname, "fixtures", "rle_fixtures.json"), "utf-8"),
);

describe("decodeRle", () => {
  it("matches the engine-generated fixture bitmaps exactly", () => {
    expect(fixtures.length).toBeGreaterThanOrEqual(3);
    for (const { name, rle, bits } of fixtures) {
      const decoded = decodeRle(rle);
      const got = Array.from(decoded, (b) => (b ? "1" : "0")).join("");
      expect(got, `fixture ${name}`).toBe(bits);
    }
  });

  it("round-trips through encodeRle", () => {
    for (const { rle } of fixtures) {
      const decoded = decodeRle(rle);
      expect(encodeRle(decoded, rle.w, rle.h)).toEqual(rle);
    }
  });

  it("rejects counts that do not cover the mask", () => {
    expect(() => decodeRle({ w: 2, h: 2, counts: [3] })).toThrow(/counts sum/);
  });

  it("rejects interior zero runs", () => {
    expect(() => decodeRle({ w: 2, h: 2, counts: [0, 2, 0, 2] })).toThrow(/interior/);
  });

  it("rejects negative runs and bad dims", () => {
    expect(() => decodeRle({ w: 2, h: 2, counts: [-1, 5] })).toThrow(/run length/);
    expect(() => decodeRle({ w: 0, h: 2, counts: [] })).toThrow(/dims/);
  });

  it("decodes the leading-zero convention", () => {
    // bits 1,0,0,1 encode as [0,1,2,1]
    expect(Array.from(decodeRle({ w: 2, h: 2, counts: [0, 1, 2, 1] }))).toEqual([1, 0, 0, 1]);
  });
});
