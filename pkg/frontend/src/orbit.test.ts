import { describe, expect, it } from "vitest";

import { defaultOrbit, ELEVATION_LIMIT, MAX_DISTANCE, MIN_DISTANCE, rotate, toCamera, zoom } from "./orbit.js";

describe("orbit camera", () => {
  it("drag right increases azimuth", () => {
    const s = rotate(defaultOrbit(), 50, 0);
    expect(s.azimuth).toBeGreaterThan(defaultOrbit().azimuth);
  });

  it("elevation clamps short of the poles", () => {
    let s = defaultOrbit();
    s = rotate(s, 0, 1e6);
    expect(s.elevation).toBeLessThanOrEqual(ELEVATION_LIMIT);
    s = rotate(s, 0, -1e6);
    expect(s.elevation).toBeGreaterThanOrEqual(-ELEVATION_LIMIT);
  });

  it("zoom multiplies and clamps distance", () => {
    let s = defaultOrbit();
    const d0 = s.distance;
    s = zoom(s, 1);
    expect(s.distance).toBeGreaterThan(d0);
    for (let i = 0; i < 100; i++) s = zoom(s, 1);
    expect(s.distance).toBe(MAX_DISTANCE);
    for (let i = 0; i < 200; i++) s = zoom(s, -1);
    expect(s.distance).toBe(MIN_DISTANCE);
  });

  it("camera sits on the orbit sphere looking at the target", () => {
    const s = { ...defaultOrbit(), target: [1, 2, 3] as [number, number, number], azimuth: 0, elevation: 0, distance: 2 };
    const cam = toCamera(s);
    expect(cam.position[0]).toBeCloseTo(1);
    expect(cam.position[1]).toBeCloseTo(2);
    expect(cam.position[2]).toBeCloseTo(5); // +z offset at azimuth 0
    expect(cam.lookAt).toEqual([1, 2, 3]);
    const r = Math.hypot(
      cam.position[0] - s.target[0],
      cam.position[1] - s.target[1],
      cam.position[2] - s.target[2],
    );
    expect(r).toBeCloseTo(s.distance);
  });

  it("rotate and zoom leave the input state untouched", () => {
    const s = defaultOrbit();
    rotate(s, 10, 10);
    zoom(s, 2);
    expect(s).toEqual(defaultOrbit());
  });
});
