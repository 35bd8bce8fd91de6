/**
 * Orbit camera: spherical coordinates around a target point.
 *
 * Azimuth grows when dragging right (the object appears to rotate left);
 * elevation is clamped short of the poles so the up vector stays valid.
 */

import type { CameraVectors } from "./protocol.js";

export interface OrbitState {
  target: [number, number, number];
  distance: number;
  azimuth: number;
  elevation: number;
  fov: number;
}

export const ELEVATION_LIMIT = Math.PI / 2 - 1e-3;
export const MIN_DISTANCE = 0.2;
export const MAX_DISTANCE = 20.0;

export function defaultOrbit(): OrbitState {
  return { target: [0, 0, 0], distance: 2.5, azimuth: 0, elevation: 0.2, fov: 0.69 };
}

export function rotate(state: OrbitState, dx: number, dy: number, speed = 0.008): OrbitState {
  const elevation = clamp(state.elevation + dy * speed, -ELEVATION_LIMIT, ELEVATION_LIMIT);
  return { ...state, azimuth: state.azimuth + dx * speed, elevation };
}

export function zoom(state: OrbitState, wheelSteps: number, factorPerStep = 1.12): OrbitState {
  const distance = clamp(state.distance * Math.pow(factorPerStep, wheelSteps), MIN_DISTANCE, MAX_DISTANCE);
  return { ...state, distance };
}

export function toCamera(state: OrbitState): CameraVectors {
  const ce = Math.cos(state.elevation);
  const offset: [number, number, number] = [
    state.distance * ce * Math.sin(state.azimuth),
    state.distance * Math.sin(state.elevation),
    state.distance * ce * Math.cos(state.azimuth),
  ];
  return {
    position: [
      state.target[0] + offset[0],
      state.target[1] + offset[1],
      state.target[2] + offset[2],
    ],
    lookAt: [...state.target],
    up: [0, 1, 0],
    fov: state.fov,
  };
}

function clamp(x: number, lo: number, hi: number): number {
  return Math.min(hi, Math.max(lo, x));
}
