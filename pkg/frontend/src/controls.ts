/** UI bindings: pointer drags on the view move the object on its ground
 * plane (vertical offset via slider), modifier/right drags orbit the camera,
 * sliders edit material, the overlay selector re-requests buffers.  All
 * outbound traffic funnels through the shared throttle.
 */

import { OutboundMsg } from "./schema.js";
import { EditThrottle, SendFn, ViewerState, orbitCamera, unprojectToGround } from "./state.js";

export interface ControlDom {
  view: HTMLCanvasElement;
  roughness: HTMLInputElement;
  metallic: HTMLInputElement;
  albedo: HTMLInputElement;
  scale: HTMLInputElement;
  height: HTMLInputElement;
  overlay: HTMLSelectElement;
  banner: HTMLElement;
}

export function currentBuffers(state: ViewerState): string[] {
  return state.overlay ? [state.overlay] : [];
}

export function bindControls(
  state: ViewerState,
  dom: ControlDom,
  send: SendFn,
  requestFrame: () => void,
): EditThrottle {
  const throttle = new EditThrottle(send, 30);

  const sendTransform = () => {
    throttle.push({
      type: "transform",
      position: [...state.position] as [number, number, number],
      scale: state.scale,
    });
  };

  let dragging: "object" | "orbit" | null = null;
  dom.view.addEventListener("pointerdown", (ev) => {
    dragging = ev.button === 2 || ev.shiftKey ? "orbit" : "object";
    dom.view.setPointerCapture(ev.pointerId);
  });
  dom.view.addEventListener("contextmenu", (ev) => ev.preventDefault());
  dom.view.addEventListener("pointerup", () => {
    dragging = null;
    throttle.flush();
    requestFrame();
  });
  dom.view.addEventListener("pointermove", (ev) => {
    if (!dragging) return;
    const rect = dom.view.getBoundingClientRect();
    if (dragging === "object") {
      const cam = orbitCamera(state);
      const hit = unprojectToGround(
        ((ev.clientX - rect.left) / rect.width) * dom.view.width,
        ((ev.clientY - rect.top) / rect.height) * dom.view.height,
        dom.view.width,
        dom.view.height,
        cam,
        state.position[2],
      );
      if (hit) {
        state.position = [hit[0], hit[1], state.position[2]];
        sendTransform();
      }
    } else {
      state.orbit.azimuth -= ev.movementX * 0.4;
      state.orbit.elevation = Math.min(85, Math.max(-10, state.orbit.elevation + ev.movementY * 0.3));
      const cam = orbitCamera(state);
      throttle.push({ type: "camera", position: cam.position, look_at: cam.look_at, fov: cam.fov });
    }
  });
  dom.view.addEventListener("wheel", (ev) => {
    ev.preventDefault();
    state.orbit.distance = Math.min(8, Math.max(0.3, state.orbit.distance * (ev.deltaY > 0 ? 1.1 : 0.9)));
    const cam = orbitCamera(state);
    throttle.push({ type: "camera", position: cam.position, look_at: cam.look_at, fov: cam.fov });
  });

  const onMaterial = () => {
    state.roughness = Number(dom.roughness.value);
    state.metallic = Number(dom.metallic.value);
    const gray = Number(dom.albedo.value);
    state.albedo = [gray, gray, gray];
    const msg: OutboundMsg = {
      type: "material",
      roughness: state.roughness,
      metallic: state.metallic,
      albedo: state.albedo,
    };
    throttle.push(msg);
  };
  dom.roughness.addEventListener("input", onMaterial);
  dom.metallic.addEventListener("input", onMaterial);
  dom.albedo.addEventListener("input", onMaterial);
  const onPlacement = () => {
    state.scale = Number(dom.scale.value);
    state.position = [state.position[0], state.position[1], Number(dom.height.value)];
    sendTransform();
  };
  dom.scale.addEventListener("input", onPlacement);
  dom.height.addEventListener("input", onPlacement);
  for (const el of [dom.roughness, dom.metallic, dom.albedo, dom.scale, dom.height]) {
    el.addEventListener("change", () => {
      throttle.flush();
      requestFrame();
    });
  }

  dom.overlay.addEventListener("change", () => {
    state.overlay = dom.overlay.value === "none" ? null : dom.overlay.value;
    requestFrame();
  });
  return throttle;
}

export function setBanner(dom: ControlDom, state: ViewerState): void {
  if (state.status !== "open") {
    dom.banner.textContent = state.status === "connecting" ? "connecting..." : "disconnected - retrying";
    dom.banner.classList.add("visible");
  } else {
    dom.banner.classList.remove("visible");
  }
}
