"""Pinhole camera poses and per-pixel ray generation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class CameraPose:
    """World-space pose: rotation columns are the camera's right/up/back axes.

    The camera looks along its local -z; fov_y is the full vertical field of
    view in radians.
    """

    position: np.ndarray
    rotation: np.ndarray
    fov_y: float
    width: int
    height: int

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        if self.rotation.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(3), atol=1e-6):
            raise ValueError("rotation must be orthonormal")
        if np.linalg.det(self.rotation) < 0:
            raise ValueError("rotation must have determinant +1")
        if not (0 < self.fov_y < np.pi):
            raise ValueError("fov_y must be in (0, pi)")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")


def look_at_pose(position, target, up, fov_y: float, width: int, height: int) -> CameraPose:
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    forward = target - position
    fn = np.linalg.norm(forward)
    if fn < 1e-12:
        raise ValueError("camera position coincides with target")
    forward = forward / fn
    if abs(np.dot(forward, up) / max(np.linalg.norm(up), 1e-12)) > 0.999:
        up = np.array([1.0, 0.0, 0.0]) if abs(forward[0]) < 0.9 else np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    true_up = np.cross(right, forward)
    rot = np.stack([right, true_up, -forward], axis=1)
    return CameraPose(position, rot, fov_y, width, height)


def pixel_rays(pose: CameraPose, pixel_xy: np.ndarray | None = None, jitter: np.ndarray | None = None):
    """Ray origins/directions through pixel centers (or jittered positions).

    pixel_xy is an (n, 2) array of (column, row) indices; None means the full
    raster in row-major order. Returns (origins (n,3), unit directions (n,3)).
    """
    if pixel_xy is None:
        cols, rows = np.meshgrid(np.arange(pose.width), np.arange(pose.height))
        pixel_xy = np.stack([cols.ravel(), rows.ravel()], axis=1)
    pixel_xy = np.asarray(pixel_xy, dtype=np.float64)
    offset = np.full_like(pixel_xy, 0.5) if jitter is None else jitter
    tan_half = np.tan(pose.fov_y / 2)
    scale = 2.0 * tan_half / pose.height
    px = (pixel_xy[:, 0] + offset[:, 0] - pose.width / 2) * scale
    py = (pose.height / 2 - pixel_xy[:, 1] - offset[:, 1]) * scale
    d_cam = np.stack([px, py, -np.ones_like(px)], axis=1)
    d_world = d_cam @ pose.rotation.T
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origins = np.broadcast_to(pose.position, d_world.shape)
    return np.ascontiguousarray(origins), d_world


def poses_on_sphere(n_views: int, radius: float, fov_y: float, width: int, height: int, seed) -> list[CameraPose]:
    """Random camera ring: positions uniform on a sphere, all looking at the origin."""
    rng = np.random.default_rng(seed)
    poses = []
    for _ in range(n_views):
        v = rng.normal(size=3)
        v /= np.linalg.norm(v)
        poses.append(look_at_pose(radius * v, (0.0, 0.0, 0.0), (0.0, 1.0, 0.0), fov_y, width, height))
    return poses
