/** Entry point: connect, pump frames, paint the canvas and stats. */

import { bindControls, ControlDom, currentBuffers, setBanner } from "./controls.js";
import { renderOverlay } from "./overlays.js";
import { FrameMsg } from "./schema.js";
import { initialState } from "./state.js";
import { WsTransport } from "./transport.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

const state = initialState();
const dom: ControlDom = {
  view: el<HTMLCanvasElement>("view"),
  roughness: el<HTMLInputElement>("roughness"),
  metallic: el<HTMLInputElement>("metallic"),
  albedo: el<HTMLInputElement>("albedo"),
  scale: el<HTMLInputElement>("scale"),
  height: el<HTMLInputElement>("height"),
  overlay: el<HTMLSelectElement>("overlay"),
  banner: el("banner"),
};
const statsEl = el("stats");
const ageEl = el("age");

const url = `ws://${location.host || "127.0.0.1:7878"}/session`;

let lastRequestAt = 0;

function requestFrame(): void {
  if (state.requestInFlight || state.status !== "open") return;
  state.requestInFlight = true;
  lastRequestAt = performance.now();
  transport.send({ type: "request_frame", buffers: currentBuffers(state) });
}

function paint(frame: FrameMsg): void {
  const ctx = dom.view.getContext("2d");
  if (!ctx) return;
  dom.view.width = frame.width;
  dom.view.height = frame.height;
  const overlay = renderOverlay(frame.buffers, state.overlay, frame.width, frame.height);
  if (overlay.pixels) {
    const pixels = new Uint8ClampedArray(overlay.pixels.length);
    pixels.set(overlay.pixels);
    ctx.putImageData(new ImageData(pixels, overlay.width, overlay.height), 0, 0);
  } else {
    const img = new Image();
    img.onload = () => ctx.drawImage(img, 0, 0);
    img.src = `data:image/png;base64,${frame.png}`;
  }
  if (overlay.note) {
    dom.banner.textContent = overlay.note;
    dom.banner.classList.add("visible");
    setTimeout(() => setBanner(dom, state), 1500);
  }
}

const transport = new WsTransport(url, {
  onMessage: (msg) => {
    if (msg.type === "error") {
      dom.banner.textContent = msg.message;
      dom.banner.classList.add("visible");
      state.requestInFlight = false;
      return;
    }
    const dt = performance.now() - lastRequestAt;
    state.stats.fps = dt > 0 ? 1000 / dt : 0;
    state.stats.sgIterations = msg.stats["sg_iterations"] ?? 0;
    state.lastFrame = msg;
    state.lastFrameAt = performance.now();
    state.requestInFlight = false;
    paint(msg);
    statsEl.textContent =
      `frame ${msg.id} | ${state.stats.fps.toFixed(1)} fps | ` +
      `sg ${state.stats.sgIterations} iters | ` +
      Object.entries(msg.timings).map(([k, v]) => `${k.replace("_ms", "")} ${v.toFixed(0)}ms`).join(" ");
    requestFrame(); // steady cadence: ask for the next frame when one lands
  },
  onStatus: (status) => {
    state.status = status;
    setBanner(dom, state);
    if (status === "open") requestFrame();
  },
});

bindControls(state, dom, (msg) => transport.send(msg), requestFrame);
transport.connect();

// stale-frame age indicator: the UI never blocks on frame arrival
setInterval(() => {
  if (state.lastFrameAt !== null) {
    const age = (performance.now() - state.lastFrameAt) / 1000;
    ageEl.textContent = age > 0.75 ? `stale ${age.toFixed(1)}s` : "";
  }
}, 250);
