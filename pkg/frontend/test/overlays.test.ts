import { describe, expect, it } from "vitest";

import { decodeFloatBuffer, grayscalePixels, renderOverlay, tonemap, tonemappedGrayscalePixels } from "../src/overlays.js";

function b64(f32: Float32Array): string {
  return Buffer.from(new Uint8Array(f32.buffer)).toString("base64");
}

describe("decodeFloatBuffer", () => {
  it("round-trips little-endian float32", () => {
    const src = new Float32Array([0, 0.25, 1, 3.5]);
    const { data, shape } = decodeFloatBuffer({ shape: [2, 2], data: b64(src) });
    expect(Array.from(data)).toEqual([0, 0.25, 1, 3.5]);
    expect(shape).toEqual([2, 2]);
  });
});

describe("tonemap", () => {
  it("matches the engine's Reinhard + gamma", () => {
    expect(tonemap(0)).toBe(0);
    expect(tonemap(1)).toBeCloseTo(Math.pow(0.5, 1 / 2.2), 12);
    expect(tonemap(1e9)).toBeLessThanOrEqual(1);
  });
});

describe("pixel rasterizers", () => {
  it("grayscale kappa=1 is uniform white", () => {
    const px = grayscalePixels(new Float32Array([1, 1, 1, 1]), 2, 2);
    for (let i = 0; i < 4; i++) {
      expect(px[i * 4]).toBe(255);
      expect(px[i * 4 + 3]).toBe(255);
    }
  });

  it("tonemapped grayscale rounds like the CLI preview path", () => {
    const v = 0.37;
    const px = tonemappedGrayscalePixels(new Float32Array([v]), 1, 1);
    expect(px[0]).toBe(Math.round(Math.pow(v / (1 + v), 1 / 2.2) * 255));
  });
});

describe("renderOverlay", () => {
  it("falls back to the final image with a notice when the buffer is missing", () => {
    const out = renderOverlay({}, "kappa", 4, 3);
    expect(out.pixels).toBeNull();
    expect(out.note).toMatch(/missing/);
  });

  it("no overlay selected shows the composite", () => {
    const out = renderOverlay({}, null, 4, 3);
    expect(out.pixels).toBeNull();
    expect(out.note).toBeNull();
  });

  it("renders RGB buffers tonemapped", () => {
    const buf = { shape: [1, 1, 3], data: b64(new Float32Array([1, 0, 4])) };
    const out = renderOverlay({ incident: buf }, "incident", 1, 1);
    expect(out.pixels).not.toBeNull();
    expect(out.pixels![0]).toBe(Math.round(tonemap(1) * 255));
    expect(out.pixels![1]).toBe(0);
    expect(out.pixels![2]).toBe(Math.round(tonemap(4) * 255));
  });
});
