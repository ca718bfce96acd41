/** Viewer-side state: pending edits, throttling, frame bookkeeping.
 *
 * Transform edits are throttled to at most `maxRatePerSec` outbound messages;
 * intermediate drags coalesce into the latest value (matching the server's
 * last-writer-wins).  At most one frame request is in flight; the UI keeps
 * showing the previous frame (with its age) until the next one lands.
 */

import { FrameMsg, OutboundMsg, Vec3 } from "./schema.js";

export interface ViewerState {
  status: "connecting" | "open" | "closed";
  position: Vec3;
  scale: number;
  roughness: number;
  metallic: number;
  albedo: Vec3;
  orbit: { azimuth: number; elevation: number; distance: number; target: Vec3; fov: number };
  overlay: string | null;
  lastFrame: FrameMsg | null;
  lastFrameAt: number | null;
  requestInFlight: boolean;
  stats: { fps: number; sgIterations: number };
}

export function initialState(): ViewerState {
  return {
    status: "closed",
    position: [0, 0, -0.3],
    scale: 0.25,
    roughness: 0.6,
    metallic: 0.0,
    albedo: [0.7, 0.7, 0.7],
    orbit: { azimuth: -90, elevation: 18, distance: 1.8, target: [0, 0, -0.3], fov: 50 },
    overlay: null,
    lastFrame: null,
    lastFrameAt: null,
    requestInFlight: false,
    stats: { fps: 0, sgIterations: 0 },
  };
}

export type SendFn = (msg: OutboundMsg) => boolean;

/** Rate limiter that coalesces bursts into the latest value. */
export class EditThrottle {
  private lastSent = -Infinity;
  private pending: OutboundMsg | null = null;
  private timer: ReturnType<typeof setTimeout> | null = null;

  constructor(
    private send: SendFn,
    private maxRatePerSec = 30,
    private now: () => number = () => performance.now(),
  ) {}

  private get interval(): number {
    return 1000 / this.maxRatePerSec;
  }

  push(msg: OutboundMsg): void {
    const t = this.now();
    if (t - this.lastSent >= this.interval) {
      this.lastSent = t;
      this.send(msg);
      return;
    }
    this.pending = msg; // coalesce: only the newest survives
    if (this.timer === null) {
      const wait = this.interval - (t - this.lastSent);
      this.timer = setTimeout(() => this.flush(), wait);
    }
  }

  flush(): void {
    if (this.timer !== null) {
      clearTimeout(this.timer);
      this.timer = null;
    }
    if (this.pending) {
      this.lastSent = this.now();
      this.send(this.pending);
      this.pending = null;
    }
  }
}

export function orbitCamera(state: ViewerState): { position: Vec3; look_at: Vec3; fov: number } {
  const o = state.orbit;
  const az = (o.azimuth * Math.PI) / 180;
  const el = (o.elevation * Math.PI) / 180;
  const pos: Vec3 = [
    o.target[0] + o.distance * Math.cos(el) * Math.cos(az),
    o.target[1] + o.distance * Math.cos(el) * Math.sin(az),
    o.target[2] + o.distance * Math.sin(el),
  ];
  return { position: pos, look_at: [...o.target] as Vec3, fov: o.fov };
}

/** Unproject a canvas pixel onto the horizontal plane z = planeZ.
 * Returns null for rays parallel to or pointing away from the plane. */
export function unprojectToGround(
  px: number,
  py: number,
  width: number,
  height: number,
  cam: { position: Vec3; look_at: Vec3; fov: number },
  planeZ: number,
): Vec3 | null {
  const fwd = norm3(sub3(cam.look_at, cam.position));
  let side = cross3(fwd, [0, 0, 1]);
  if (len3(side) < 1e-9) side = cross3(fwd, [0, 1, 0]);
  side = norm3(side);
  const up = cross3(side, fwd);
  const h = Math.tan(((cam.fov / 2) * Math.PI) / 180);
  const w = (h * width) / height;
  const ndcX = ((px + 0.5) / width) * 2 - 1;
  const ndcY = 1 - ((py + 0.5) / height) * 2;
  const dir = norm3([
    fwd[0] + ndcX * w * side[0] + ndcY * h * up[0],
    fwd[1] + ndcX * w * side[1] + ndcY * h * up[1],
    fwd[2] + ndcX * w * side[2] + ndcY * h * up[2],
  ]);
  const denom = dir[2];
  if (Math.abs(denom) < 1e-9) return null;
  const t = (planeZ - cam.position[2]) / denom;
  if (t <= 0) return null;
  return [
    cam.position[0] + t * dir[0],
    cam.position[1] + t * dir[1],
    planeZ,
  ];
}

function sub3(a: Vec3, b: Vec3): Vec3 {
  return [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
}

function cross3(a: Vec3, b: Vec3): Vec3 {
  return [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
}

function len3(a: Vec3): number {
  return Math.hypot(a[0], a[1], a[2]);
}

function norm3(a: Vec3): Vec3 {
  const n = len3(a) || 1;
  return [a[0] / n, a[1] / n, a[2] / n];
}
