/** Scripted session against the real server: connect, edit, request a frame,
 * and compare byte-for-byte with the CLI render of the same manifest+seed.
 * Exercises the viewer's own codec and overlay paths end to end.
 */

import { spawn, spawnSync } from "node:child_process";
import { mkdtempSync, readFileSync, writeFileSync } from "node:fs";
import net from "node:net";
import { tmpdir } from "node:os";
import path from "node:path";
import { fileURLToPath } from "node:url";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { tonemappedGrayscalePixels } from "../src/overlays.js";
import { FrameMsg, InboundMsg, OutboundMsg } from "../src/schema.js";
import { NativeCodec } from "../src/transport.js";

const repoRoot = path.resolve(path.dirname(fileURLToPath(import.meta.url)), "..", "..");
const pyEnv = { ...process.env, PYTHONPATH: path.join(repoRoot, "src"), PYTHONUNBUFFERED: "1" };

const EDITS: OutboundMsg[] = [
  { type: "transform", position: [0.15, -0.05, -0.32], scale: 0.28 },
  { type: "material", roughness: 0.45, metallic: 0.1, albedo: [0.65, 0.55, 0.45] },
];

let work: string;
let serverProc: ReturnType<typeof spawn> | null = null;
let serverPort = 0;

function cli(args: string[]): void {
  const res = spawnSync("python3", ["-m", "sginsert.cli", ...args], {
    cwd: repoRoot,
    env: pyEnv,
    encoding: "utf8",
  });
  if (res.status !== 0) {
    throw new Error(`cli ${args.join(" ")} failed: ${res.stderr}`);
  }
}

function manifest(extra: Record<string, unknown>): string {
  return JSON.stringify({
    scene: "floor_plane@32",
    object: "sphere@2",
    env: path.join(work, "env.sgmix"),
    ssdf: path.join(work, "obj.ssdf"),
    fh: path.join(work, "table.fht"),
    res: [64, 36],
    seed: 17,
    incident_res: 16,
    rays_per_texel: 2,
    transform: { position: [0, 0, -0.3], rotation: [1, 0, 0, 0], scale: 0.25 },
    material: { roughness: 0.6, metallic: 0.0, albedo: [0.7, 0.7, 0.7] },
    ...extra,
  });
}

async function freePort(): Promise<number> {
  return new Promise((resolve) => {
    const srv = net.createServer();
    srv.listen(0, "127.0.0.1", () => {
      const port = (srv.address() as net.AddressInfo).port;
      srv.close(() => resolve(port));
    });
  });
}

class ScriptedSession {
  private codec = new NativeCodec();
  private socket: net.Socket;
  private queue: InboundMsg[] = [];
  private waiter: ((msg: InboundMsg) => void) | null = null;

  constructor(port: number) {
    this.socket = net.createConnection(port, "127.0.0.1");
    this.socket.on("data", (chunk) => {
      for (const msg of this.codec.feed(new Uint8Array(chunk))) {
        if (this.waiter) {
          const w = this.waiter;
          this.waiter = null;
          w(msg);
        } else {
          this.queue.push(msg);
        }
      }
    });
  }

  ready(): Promise<void> {
    return new Promise((resolve, reject) => {
      this.socket.once("connect", resolve);
      this.socket.once("error", reject);
    });
  }

  send(msg: OutboundMsg): void {
    this.socket.write(this.codec.encode(msg));
  }

  next(timeoutMs = 120_000): Promise<InboundMsg> {
    const queued = this.queue.shift();
    if (queued) return Promise.resolve(queued);
    return new Promise((resolve, reject) => {
      const timer = setTimeout(() => reject(new Error("timed out waiting for reply")), timeoutMs);
      this.waiter = (msg) => {
        clearTimeout(timer);
        resolve(msg);
      };
    });
  }

  close(): void {
    this.socket.destroy();
  }
}

function readPfm(file: string): { data: Float32Array; width: number; height: number } {
  const raw = readFileSync(file);
  let off = 0;
  const line = () => {
    const nl = raw.indexOf(0x0a, off);
    const s = raw.subarray(off, nl).toString("latin1").trim();
    off = nl + 1;
    return s;
  };
  const magic = line();
  if (magic !== "PF") throw new Error(`not a color PFM: ${file}`);
  const [w, h] = line().split(/\s+/).map(Number) as [number, number];
  const scale = Number(line());
  if (scale > 0) throw new Error("big-endian PFM unsupported here");
  const aligned = new Uint8Array(raw.subarray(off, off + 4 * w * h * 3));
  const floats = new Float32Array(aligned.buffer, 0, w * h * 3);
  // PFM rows are bottom-up; flip to top-down
  const out = new Float32Array(w * h * 3);
  for (let y = 0; y < h; y++) {
    out.set(floats.subarray((h - 1 - y) * w * 3, (h - y) * w * 3), y * w * 3);
  }
  return { data: out, width: w, height: h };
}

beforeAll(async () => {
  work = mkdtempSync(path.join(tmpdir(), "sginsert-viewer-"));
  // env mixture: plain text format, written directly
  const axis = [0.25, 0.2, 0.95];
  const n = Math.hypot(...axis);
  writeFileSync(
    path.join(work, "env.sgmix"),
    `SGMIX 1\n${axis.map((x) => x / n).join(" ")} 30 6 5.5 5\n`,
  );
  cli(["precompute-ssdf", "sphere@2", "--dir-res", "16", "--out", path.join(work, "obj.ssdf")]);
  cli(["build-fh", "--theta-res", "128", "--lambda-res", "32", "--out", path.join(work, "table.fht")]);
  writeFileSync(path.join(work, "serve.json"), manifest({}));

  serverPort = await freePort();
  serverProc = spawn(
    "python3",
    ["-m", "sginsert.cli", "serve", "--manifest", path.join(work, "serve.json"),
     "--port", String(serverPort)],
    { cwd: repoRoot, env: pyEnv, stdio: ["ignore", "pipe", "pipe"] },
  );
  await new Promise<void>((resolve, reject) => {
    const timer = setTimeout(() => reject(new Error("server did not start")), 60_000);
    serverProc!.stdout!.on("data", (d: Buffer) => {
      if (d.toString().includes("session server on")) {
        clearTimeout(timer);
        resolve();
      }
    });
    serverProc!.stderr!.on("data", (d: Buffer) => process.stderr.write(d));
  });
}, 180_000);

afterAll(() => {
  serverProc?.kill();
});

describe("scripted session vs CLI render", () => {
  it("produces a byte-identical frame and a matching kappa overlay", async () => {
    const session = new ScriptedSession(serverPort);
    await session.ready();
    for (const edit of EDITS) session.send(edit);
    session.send({ type: "request_frame", buffers: ["kappa"] });
    const reply = (await session.next()) as FrameMsg;
    session.close();
    expect(reply.type).toBe("frame");
    expect(reply.id).toBe(0);

    // CLI render of the same manifest + the scripted edits baked in
    const edited = manifest({
      transform: { position: [0.15, -0.05, -0.32], rotation: [1, 0, 0, 0], scale: 0.28 },
      material: { roughness: 0.45, metallic: 0.1, albedo: [0.65, 0.55, 0.45] },
    });
    writeFileSync(path.join(work, "edited.json"), edited);
    cli([
      "render", "--manifest", path.join(work, "edited.json"),
      "--out", path.join(work, "cli.png"), "--dump-aux", "kappa",
    ]);

    const cliPng = readFileSync(path.join(work, "cli.png"));
    const serverPng = Buffer.from(reply.png, "base64");
    expect(serverPng.equals(cliPng)).toBe(true);

    // kappa overlay snapshot == tone-mapped CLI kappa PFM
    const kbuf = reply.buffers["kappa"]!;
    expect(kbuf.shape).toEqual([36, 64]);
    const raw = Buffer.from(kbuf.data, "base64");
    const server = tonemappedGrayscalePixels(
      new Float32Array(raw.buffer, raw.byteOffset, 36 * 64), 36, 64,
    );
    const pfm = readPfm(path.join(work, "cli.kappa.pfm"));
    expect(pfm.width).toBe(64);
    const gray = new Float32Array(36 * 64);
    for (let i = 0; i < gray.length; i++) gray[i] = pfm.data[i * 3]!;
    const cliPix = tonemappedGrayscalePixels(gray, 36, 64);
    expect(Buffer.from(server).equals(Buffer.from(cliPix))).toBe(true);
    // the sphere actually shadows the floor in this configuration
    let dark = 0;
    for (let i = 0; i < gray.length; i++) if (gray[i]! < 0.9) dark++;
    expect(dark).toBeGreaterThan(10);
  }, 300_000);

  it("rejects malformed edits but keeps serving", async () => {
    const session = new ScriptedSession(serverPort);
    await session.ready();
    session.send({ type: "transform", position: [0, 0, -0.3], scale: 0.25 });
    // bypass client-side validation to exercise the server's reply
    session["socket"].write(
      (() => {
        const body = Buffer.from(JSON.stringify({ type: "material", roughness: 42 }));
        const head = Buffer.alloc(4);
        head.writeUInt32BE(body.length);
        return Buffer.concat([head, body]);
      })(),
    );
    const err = await session.next();
    expect(err.type).toBe("error");
    session.send({ type: "request_frame" });
    const frame = await session.next();
    expect(frame.type).toBe("frame");
    session.close();
  }, 300_000);
});
