/**
 * Wire protocol for the render service (docs/protocol.md, version 1).
 *
 * All protocol knowledge lives here: JSON control messages out, the 32-byte
 * little-endian binary frame header in. Keep this file in sync with the
 * server; nothing else in the client knows byte offsets.
 */

export const PROTOCOL_VERSION = 1;
export const FRAME_HEADER_BYTES = 32;
export const PIXEL_RGB8 = 1;

export const RENDERER_SPHERE = 0;
export const RENDERER_PATH = 1;

export type PassName = "color" | "normal" | "depth";
export type RendererName = "sphere" | "path";

export interface FrameMeta {
  sequence: number;
  width: number;
  height: number;
  pixelFormat: number;
  rendererKind: number;
  renderMs: number;
  spp: number;
  cameraGeneration: number;
}

export interface DecodedFrame {
  meta: FrameMeta;
  /** Raw RGB8, row-major, top row first; length = 3 * width * height. */
  pixels: Uint8Array;
}

export function decodeFrame(buf: ArrayBuffer): DecodedFrame {
  if (buf.byteLength < FRAME_HEADER_BYTES) {
    throw new Error(`frame too short: ${buf.byteLength} bytes`);
  }
  const view = new DataView(buf);
  const meta: FrameMeta = {
    sequence: Number(view.getBigUint64(0, true)),
    width: view.getUint32(8, true),
    height: view.getUint32(12, true),
    pixelFormat: view.getUint16(16, true),
    rendererKind: view.getUint16(18, true),
    renderMs: view.getFloat32(20, true),
    spp: view.getUint32(24, true),
    cameraGeneration: view.getUint32(28, true),
  };
  const expected = FRAME_HEADER_BYTES + 3 * meta.width * meta.height;
  if (buf.byteLength !== expected) {
    throw new Error(`frame is ${buf.byteLength} bytes, expected ${expected}`);
  }
  if (meta.pixelFormat !== PIXEL_RGB8) {
    throw new Error(`unsupported pixel format ${meta.pixelFormat}`);
  }
  return { meta, pixels: new Uint8Array(buf, FRAME_HEADER_BYTES) };
}

/** Test helper / documentation-by-construction of the header layout. */
export function encodeFrame(meta: FrameMeta, pixels: Uint8Array): ArrayBuffer {
  const buf = new ArrayBuffer(FRAME_HEADER_BYTES + pixels.length);
  const view = new DataView(buf);
  view.setBigUint64(0, BigInt(meta.sequence), true);
  view.setUint32(8, meta.width, true);
  view.setUint32(12, meta.height, true);
  view.setUint16(16, meta.pixelFormat, true);
  view.setUint16(18, meta.rendererKind, true);
  view.setFloat32(20, meta.renderMs, true);
  view.setUint32(24, meta.spp, true);
  view.setUint32(28, meta.cameraGeneration, true);
  new Uint8Array(buf, FRAME_HEADER_BYTES).set(pixels);
  return buf;
}

export interface CameraVectors {
  position: [number, number, number];
  lookAt: [number, number, number];
  up: [number, number, number];
  fov: number;
}

export function helloMessage(): string {
  return JSON.stringify({ type: "hello", version: PROTOCOL_VERSION });
}

export function cameraMessage(cam: CameraVectors): string {
  return JSON.stringify({
    type: "camera",
    position: cam.position,
    look_at: cam.lookAt,
    up: cam.up,
    fov: cam.fov,
  });
}

export interface SettingsUpdate {
  pass?: PassName;
  resolution?: [number, number];
  spp?: number;
  renderer?: RendererName;
}

export function settingsMessage(s: SettingsUpdate): string {
  const msg: Record<string, unknown> = { type: "settings" };
  if (s.pass !== undefined) msg.pass = s.pass;
  if (s.resolution !== undefined) msg.resolution = s.resolution;
  if (s.spp !== undefined) msg.spp = s.spp;
  if (s.renderer !== undefined) msg.renderer = s.renderer;
  return JSON.stringify(msg);
}

export function pingMessage(): string {
  return JSON.stringify({ type: "ping" });
}
