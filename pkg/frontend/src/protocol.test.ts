import { describe, expect, it } from "vitest";

import {
  cameraMessage,
  decodeFrame,
  encodeFrame,
  FRAME_HEADER_BYTES,
  FrameMeta,
  helloMessage,
  pingMessage,
  PROTOCOL_VERSION,
  settingsMessage,
} from "./protocol.js";

function sampleMeta(): FrameMeta {
  return {
    sequence: 42,
    width: 3,
    height: 2,
    pixelFormat: 1,
    rendererKind: 1,
    renderMs: 16.5,
    spp: 7,
    cameraGeneration: 5,
  };
}

describe("frame codec", () => {
  it("round trips header and pixels", () => {
    const meta = sampleMeta();
    const pixels = new Uint8Array(3 * 3 * 2).map((_, i) => i * 7);
    const buf = encodeFrame(meta, pixels);
    expect(buf.byteLength).toBe(FRAME_HEADER_BYTES + 18);
    const decoded = decodeFrame(buf);
    expect(decoded.meta).toEqual({ ...meta, renderMs: expect.closeTo(16.5, 3) });
    expect(Array.from(decoded.pixels)).toEqual(Array.from(pixels));
  });

  it("reads little-endian fields at the documented offsets", () => {
    const meta = sampleMeta();
    const buf = encodeFrame(meta, new Uint8Array(18));
    const bytes = new Uint8Array(buf);
    expect(bytes[0]).toBe(42); // u64 sequence, LE
    expect(bytes[8]).toBe(3); // width
    expect(bytes[12]).toBe(2); // height
    expect(bytes[16]).toBe(1); // pixel format
    expect(bytes[18]).toBe(1); // renderer kind
    expect(bytes[24]).toBe(7); // spp
    expect(bytes[28]).toBe(5); // camera generation
  });

  it("rejects truncated frames", () => {
    const buf = encodeFrame(sampleMeta(), new Uint8Array(18));
    expect(() => decodeFrame(buf.slice(0, 40))).toThrow(/expected/);
  });

  it("rejects unknown pixel formats", () => {
    const meta = { ...sampleMeta(), pixelFormat: 9 };
    expect(() => decodeFrame(encodeFrame(meta, new Uint8Array(18)))).toThrow(/pixel format/);
  });
});

describe("control messages", () => {
  it("hello carries the protocol version", () => {
    expect(JSON.parse(helloMessage())).toEqual({ type: "hello", version: PROTOCOL_VERSION });
  });

  it("camera message uses server field names", () => {
    const msg = JSON.parse(
      cameraMessage({ position: [1, 2, 3], lookAt: [0, 0, 0], up: [0, 1, 0], fov: 0.7 }),
    );
    expect(msg).toEqual({ type: "camera", position: [1, 2, 3], look_at: [0, 0, 0], up: [0, 1, 0], fov: 0.7 });
  });

  it("settings message includes only the provided fields", () => {
    expect(JSON.parse(settingsMessage({ pass: "normal" }))).toEqual({ type: "settings", pass: "normal" });
    expect(JSON.parse(settingsMessage({ resolution: [256, 256], spp: 64 }))).toEqual({
      type: "settings",
      resolution: [256, 256],
      spp: 64,
    });
  });

  it("ping is minimal", () => {
    expect(JSON.parse(pingMessage())).toEqual({ type: "ping" });
  });
});
