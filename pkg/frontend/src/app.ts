/**
 * Viewer page wiring: canvas, overlay, pointer input, settings controls.
 */

import { defaultOrbit, OrbitState, rotate, toCamera, zoom } from "./orbit.js";
import {
  cameraMessage,
  DecodedFrame,
  PassName,
  RENDERER_PATH,
  RendererName,
  settingsMessage,
} from "./protocol.js";
import { CameraCoalescer, FpsMeter, FrameStream, StreamStatus } from "./stream.js";

export function drawFrame(ctx: CanvasRenderingContext2D, frame: DecodedFrame): void {
  const { width, height } = frame.meta;
  if (ctx.canvas.width !== width || ctx.canvas.height !== height) {
    ctx.canvas.width = width;
    ctx.canvas.height = height;
  }
  const rgba = new Uint8ClampedArray(width * height * 4);
  const src = frame.pixels;
  for (let i = 0, j = 0; i < src.length; i += 3, j += 4) {
    rgba[j] = src[i];
    rgba[j + 1] = src[i + 1];
    rgba[j + 2] = src[i + 2];
    rgba[j + 3] = 255;
  }
  ctx.putImageData(new ImageData(rgba, width, height), 0, 0);
}

export function startViewer(root: Document = document): void {
  const canvas = root.getElementById("view") as HTMLCanvasElement;
  const banner = root.getElementById("banner") as HTMLDivElement;
  const overlay = root.getElementById("overlay") as HTMLDivElement;
  const passSelect = root.getElementById("pass") as HTMLSelectElement;
  const rendererSelect = root.getElementById("renderer") as HTMLSelectElement;
  const resolutionSelect = root.getElementById("resolution") as HTMLSelectElement;
  const ctx = canvas.getContext("2d")!;

  const params = new URLSearchParams(location.search);
  const url = params.get("ws") ?? `ws://${location.hostname || "127.0.0.1"}:8765/render`;

  let orbit: OrbitState = defaultOrbit();
  const fpsMeter = new FpsMeter();
  let currentPass: PassName = "color";

  const stream = new FrameStream(url, {
    onFrame(frame) {
      drawFrame(ctx, frame);
      const fps = fpsMeter.tick(performance.now());
      const parts = [
        `pass: ${currentPass}`,
        fps !== null ? `fps: ${fps.toFixed(1)}` : "fps: --",
        `seq: ${frame.meta.sequence}`,
        `${frame.meta.renderMs.toFixed(0)} ms`,
      ];
      if (frame.meta.rendererKind === RENDERER_PATH) {
        parts.push(`spp: ${frame.meta.spp}`);
      }
      overlay.textContent = parts.join("  |  ");
    },
    onStatus(status: StreamStatus, detail?: string) {
      banner.dataset.status = status;
      banner.textContent = detail ? `${status}: ${detail}` : status;
      banner.style.display = status === "connected" ? "none" : "block";
    },
    onRetryScheduled(delayMs) {
      banner.textContent = `disconnected, retrying in ${(delayMs / 1000).toFixed(1)} s`;
      banner.style.display = "block";
    },
  });

  const coalescer = new CameraCoalescer(
    (text) => stream.send(text),
    (fn) => requestAnimationFrame(fn),
  );
  const pushCamera = () => coalescer.update(cameraMessage(toCamera(orbit)));

  let dragging = false;
  let lastX = 0;
  let lastY = 0;
  canvas.addEventListener("pointerdown", (ev) => {
    dragging = true;
    lastX = ev.clientX;
    lastY = ev.clientY;
    canvas.setPointerCapture(ev.pointerId);
  });
  canvas.addEventListener("pointermove", (ev) => {
    if (!dragging) return;
    orbit = rotate(orbit, ev.clientX - lastX, ev.clientY - lastY);
    lastX = ev.clientX;
    lastY = ev.clientY;
    if (stream.connected) pushCamera();
  });
  canvas.addEventListener("pointerup", () => {
    dragging = false;
  });
  canvas.addEventListener("wheel", (ev) => {
    ev.preventDefault();
    orbit = zoom(orbit, Math.sign(ev.deltaY));
    if (stream.connected) pushCamera();
  });

  passSelect.addEventListener("change", () => {
    currentPass = passSelect.value as PassName;
    stream.send(settingsMessage({ pass: currentPass }));
  });
  rendererSelect.addEventListener("change", () => {
    stream.send(settingsMessage({ renderer: rendererSelect.value as RendererName, spp: 256 }));
  });
  resolutionSelect.addEventListener("change", () => {
    const n = parseInt(resolutionSelect.value, 10);
    stream.send(settingsMessage({ resolution: [n, n] }));
  });

  stream.connect();
}
