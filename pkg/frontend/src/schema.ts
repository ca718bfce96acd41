/** Session message schema shared with the server; every outbound message is
 * validated before it is sent. */

export type Vec3 = [number, number, number];
export type Quat = [number, number, number, number]; // w, x, y, z

export interface TransformMsg {
  type: "transform";
  position?: Vec3;
  rotation?: Quat;
  scale?: number;
}

export interface MaterialMsg {
  type: "material";
  roughness?: number;
  metallic?: number;
  albedo?: Vec3;
}

export interface CameraMsg {
  type: "camera";
  position?: Vec3;
  look_at?: Vec3;
  up?: Vec3;
  fov?: number;
  width?: number;
  height?: number;
}

export interface RequestFrameMsg {
  type: "request_frame";
  buffers?: string[];
}

export type OutboundMsg = TransformMsg | MaterialMsg | CameraMsg | RequestFrameMsg;

export interface FrameBuffer {
  shape: number[];
  data: string; // base64 little-endian float32
}

export interface FrameMsg {
  type: "frame";
  id: number;
  width: number;
  height: number;
  png: string; // base64
  timings: Record<string, number>;
  stats: Record<string, number>;
  buffers: Record<string, FrameBuffer>;
}

export interface ErrorMsg {
  type: "error";
  message: string;
}

export type InboundMsg = FrameMsg | ErrorMsg;

const OVERLAYS = ["kappa", "i_alpha", "incident", "incident_fit", "depth", "mask", "object"];

function isVec3(v: unknown): v is Vec3 {
  return Array.isArray(v) && v.length === 3 && v.every((x) => Number.isFinite(x));
}

function inUnit(x: number): boolean {
  return x >= 0 && x <= 1;
}

/** Throws on contract violations; returns the message for chaining. */
export function validateOutbound(msg: OutboundMsg): OutboundMsg {
  switch (msg.type) {
    case "transform": {
      if (msg.position !== undefined && !isVec3(msg.position)) {
        throw new Error("transform.position must be a finite 3-vector");
      }
      if (msg.scale !== undefined && !(msg.scale > 0)) {
        throw new Error("transform.scale must be positive");
      }
      if (msg.rotation !== undefined) {
        const q = msg.rotation;
        if (!Array.isArray(q) || q.length !== 4 || !q.every((x) => Number.isFinite(x))) {
          throw new Error("transform.rotation must be a quaternion [w,x,y,z]");
        }
        const n = Math.hypot(q[0], q[1], q[2], q[3]);
        if (Math.abs(n - 1) > 1e-3) {
          throw new Error("transform.rotation must be normalized");
        }
      }
      return msg;
    }
    case "material": {
      if (msg.roughness !== undefined && !inUnit(msg.roughness)) {
        throw new Error("material.roughness must be in [0,1]");
      }
      if (msg.metallic !== undefined && !inUnit(msg.metallic)) {
        throw new Error("material.metallic must be in [0,1]");
      }
      if (msg.albedo !== undefined && !(isVec3(msg.albedo) && msg.albedo.every(inUnit))) {
        throw new Error("material.albedo must be RGB in [0,1]");
      }
      return msg;
    }
    case "camera": {
      for (const k of ["position", "look_at", "up"] as const) {
        const v = msg[k];
        if (v !== undefined && !isVec3(v)) throw new Error(`camera.${k} must be a 3-vector`);
      }
      if (msg.fov !== undefined && !(msg.fov > 1 && msg.fov < 179)) {
        throw new Error("camera.fov must be in (1, 179) degrees");
      }
      return msg;
    }
    case "request_frame": {
      if (msg.buffers !== undefined) {
        if (!Array.isArray(msg.buffers)) throw new Error("buffers must be a list");
        for (const b of msg.buffers) {
          if (!OVERLAYS.includes(b)) throw new Error(`unknown buffer ${b}`);
        }
      }
      return msg;
    }
    default: {
      const never: never = msg;
      throw new Error(`unknown outbound type ${(never as { type?: string }).type}`);
    }
  }
}

export function parseInbound(text: string): InboundMsg {
  const obj = JSON.parse(text) as { type?: string };
  if (obj.type === "frame" || obj.type === "error") return obj as InboundMsg;
  throw new Error(`unexpected message type ${obj.type}`);
}
