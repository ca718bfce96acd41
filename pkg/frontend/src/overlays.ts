/** Overlay rendering: requested float buffers become displayable pixels.
 *
 * kappa / i_alpha / mask / depth render as grayscale; incident-light buffers
 * (RGB over the octahedral unwrap) are tone mapped with the same Reinhard +
 * gamma 2.2 the engine uses for PNG previews, so snapshots are comparable
 * with CLI-exported buffers.
 */

import { FrameBuffer } from "./schema.js";

export function decodeFloatBuffer(buf: FrameBuffer): { data: Float32Array; shape: number[] } {
  const raw = atob(buf.data);
  const bytes = new Uint8Array(raw.length);
  for (let i = 0; i < raw.length; i++) bytes[i] = raw.charCodeAt(i);
  return { data: new Float32Array(bytes.buffer), shape: buf.shape };
}

export function tonemap(x: number, gamma = 2.2): number {
  const v = Math.max(x, 0);
  return Math.min(Math.pow(v / (1 + v), 1 / gamma), 1);
}

/** Grayscale RGBA pixels for a (H, W) scalar buffer; values clamped to [0,1]. */
export function grayscalePixels(data: Float32Array, h: number, w: number): Uint8ClampedArray {
  const out = new Uint8ClampedArray(h * w * 4);
  for (let i = 0; i < h * w; i++) {
    const v = Math.round(Math.min(Math.max(data[i] ?? 0, 0), 1) * 255);
    out[i * 4 + 0] = v;
    out[i * 4 + 1] = v;
    out[i * 4 + 2] = v;
    out[i * 4 + 3] = 255;
  }
  return out;
}

/** Tone-mapped grayscale for kappa-like scalar buffers, matching the CLI's
 * PFM-to-preview path (Reinhard + gamma on each channel). */
export function tonemappedGrayscalePixels(data: Float32Array, h: number, w: number): Uint8ClampedArray {
  const out = new Uint8ClampedArray(h * w * 4);
  for (let i = 0; i < h * w; i++) {
    const v = Math.round(tonemap(data[i] ?? 0) * 255 + 0.0);
    out[i * 4 + 0] = v;
    out[i * 4 + 1] = v;
    out[i * 4 + 2] = v;
    out[i * 4 + 3] = 255;
  }
  return out;
}

/** Tone-mapped RGBA for (H, W, 3) HDR buffers (incident-light unwraps). */
export function tonemappedRgbPixels(data: Float32Array, h: number, w: number): Uint8ClampedArray {
  const out = new Uint8ClampedArray(h * w * 4);
  for (let i = 0; i < h * w; i++) {
    for (let c = 0; c < 3; c++) {
      out[i * 4 + c] = Math.round(tonemap(data[i * 3 + c] ?? 0) * 255);
    }
    out[i * 4 + 3] = 255;
  }
  return out;
}

export interface OverlayResult {
  pixels: Uint8ClampedArray | null; // null -> show the final frame
  width: number;
  height: number;
  note: string | null;
}

/** Pick and rasterize the requested overlay from a frame's buffers. */
export function renderOverlay(
  buffers: Record<string, FrameBuffer>,
  overlay: string | null,
  frameW: number,
  frameH: number,
): OverlayResult {
  if (!overlay) return { pixels: null, width: frameW, height: frameH, note: null };
  const buf = buffers[overlay];
  if (!buf) {
    return {
      pixels: null,
      width: frameW,
      height: frameH,
      note: `buffer "${overlay}" missing; showing final image`,
    };
  }
  const { data, shape } = decodeFloatBuffer(buf);
  const h = shape[0] ?? frameH;
  const w = shape[1] ?? frameW;
  if (shape.length === 3 && shape[2] === 3) {
    return { pixels: tonemappedRgbPixels(data, h, w), width: w, height: h, note: null };
  }
  if (overlay === "kappa") {
    return { pixels: tonemappedGrayscalePixels(data, h, w), width: w, height: h, note: null };
  }
  return { pixels: grayscalePixels(data, h, w), width: w, height: h, note: null };
}
