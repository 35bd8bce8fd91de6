"""Analytic SDF + color oracles used as distillation teachers.

Exact signed distances with closed-form normals stand in for a pretrained
implicit-surface model, so the student grid can be judged against a perfect
reference. All shape/color evaluators are pure and batch-oriented: points
are (n, 3) arrays, results are (n,) or (n, 3).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import GridConfig


class SingularNormalError(ValueError):
    """Normal requested where the SDF gradient is undefined (e.g. a center)."""


# ---------------------------------------------------------------------------
# shapes


@dataclass
class Sphere:
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.5

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        if self.radius <= 0:
            raise ValueError("radius must be > 0")

    def sdf(self, pts: np.ndarray) -> np.ndarray:
        return np.linalg.norm(pts - self.center, axis=-1) - self.radius

    def normal(self, pts: np.ndarray) -> np.ndarray:
        d = pts - self.center
        r = np.linalg.norm(d, axis=-1, keepdims=True)
        if np.any(r < 1e-12):
            raise SingularNormalError("normal undefined at the sphere center")
        return d / r


@dataclass
class Box:
    center: tuple = (0.0, 0.0, 0.0)
    half_extents: tuple = (0.3, 0.3, 0.3)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.half_extents = np.asarray(self.half_extents, dtype=np.float64)
        if np.any(self.half_extents <= 0):
            raise ValueError("half_extents must be > 0")

    def sdf(self, pts: np.ndarray) -> np.ndarray:
        q = np.abs(pts - self.center) - self.half_extents
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside

    def normal(self, pts: np.ndarray) -> np.ndarray:
        p = pts - self.center
        q = np.abs(p) - self.half_extents
        out = np.where(q > 0, np.maximum(q, 0.0) * np.sign(p), 0.0)
        interior = np.all(q <= 0, axis=-1)
        if np.any(interior):
            # inside: push along the axis closest to a face
            axis = np.argmax(q[interior], axis=-1)
            face = np.zeros((interior.sum(), 3))
            face[np.arange(len(axis)), axis] = np.sign(p[interior][np.arange(len(axis)), axis])
            out[interior] = face
        nrm = np.linalg.norm(out, axis=-1, keepdims=True)
        if np.any(nrm < 1e-12):
            raise SingularNormalError("normal undefined at the box center")
        return out / nrm


@dataclass
class Torus:
    """Ring of radius ring_radius in the y=center_y plane, tube radius tube_radius."""

    center: tuple = (0.0, 0.0, 0.0)
    ring_radius: float = 0.5
    tube_radius: float = 0.2

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        if self.ring_radius <= 0 or self.tube_radius <= 0:
            raise ValueError("radii must be > 0")

    def sdf(self, pts: np.ndarray) -> np.ndarray:
        p = pts - self.center
        ring = np.hypot(p[..., 0], p[..., 2]) - self.ring_radius
        return np.hypot(ring, p[..., 1]) - self.tube_radius

    def normal(self, pts: np.ndarray) -> np.ndarray:
        p = pts - self.center
        rxz = np.hypot(p[..., 0], p[..., 2])
        if np.any(rxz < 1e-12):
            raise SingularNormalError("normal undefined on the torus axis")
        ring = rxz - self.ring_radius
        tube = np.hypot(ring, p[..., 1])
        if np.any(tube < 1e-12):
            raise SingularNormalError("normal undefined on the ring circle")
        g = np.stack(
            [ring / tube * p[..., 0] / rxz, p[..., 1] / tube, ring / tube * p[..., 2] / rxz],
            axis=-1,
        )
        return g / np.linalg.norm(g, axis=-1, keepdims=True)


@dataclass
class Union:
    a: object
    b: object

    def sdf(self, pts: np.ndarray) -> np.ndarray:
        return np.minimum(self.a.sdf(pts), self.b.sdf(pts))


@dataclass
class SmoothUnion:
    """Polynomial smooth-min blend; only a lower bound of the true distance."""

    a: object
    b: object
    k: float = 0.1

    def __post_init__(self):
        if self.k <= 0:
            raise ValueError("blend k must be > 0")

    def sdf(self, pts: np.ndarray) -> np.ndarray:
        d1 = self.a.sdf(pts)
        d2 = self.b.sdf(pts)
        h = np.clip(0.5 + 0.5 * (d2 - d1) / self.k, 0.0, 1.0)
        return d2 + (d1 - d2) * h - self.k * h * (1.0 - h)


# ---------------------------------------------------------------------------
# color models


@dataclass
class FlatAlbedo:
    rgb: tuple = (0.8, 0.2, 0.2)

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        _check_rgb(self.rgb)

    def color(self, x, v, n):
        return np.broadcast_to(self.rgb, x.shape).copy()


@dataclass
class PositionStripes:
    """Smooth periodic blend between two colors along one axis."""

    axis: int = 0
    period: float = 0.4
    rgb_a: tuple = (0.9, 0.6, 0.2)
    rgb_b: tuple = (0.2, 0.3, 0.8)

    def __post_init__(self):
        self.rgb_a = np.asarray(self.rgb_a, dtype=np.float64)
        self.rgb_b = np.asarray(self.rgb_b, dtype=np.float64)
        _check_rgb(self.rgb_a)
        _check_rgb(self.rgb_b)
        if self.period <= 0:
            raise ValueError("period must be > 0")
        if self.axis not in (0, 1, 2):
            raise ValueError("axis must be 0, 1 or 2")

    def color(self, x, v, n):
        t = 0.5 + 0.5 * np.sin(2.0 * np.pi * x[..., self.axis] / self.period)
        return self.rgb_a + (self.rgb_b - self.rgb_a) * t[..., None]


@dataclass
class ViewTint:
    """Base color brightened by how frontally the view direction hits the surface."""

    base_rgb: tuple = (0.5, 0.5, 0.5)
    tint_strength: float = 0.3

    def __post_init__(self):
        self.base_rgb = np.asarray(self.base_rgb, dtype=np.float64)
        _check_rgb(self.base_rgb)

    def color(self, x, v, n):
        facing = np.maximum(0.0, -np.sum(v * n, axis=-1))
        return np.clip(self.base_rgb + self.tint_strength * facing[..., None], 0.0, 1.0)


def _check_rgb(rgb):
    if np.any(rgb < 0) or np.any(rgb > 1):
        raise ValueError("color components must lie in [0, 1]")


# ---------------------------------------------------------------------------
# the teacher


@dataclass
class AnalyticTeacher:
    shape: object
    color_model: object

    def sdf(self, pts: np.ndarray) -> np.ndarray:
        return self.shape.sdf(np.atleast_2d(np.asarray(pts, dtype=np.float64)))

    def normal(self, pts: np.ndarray, fd_step: float = 1e-5) -> np.ndarray:
        """Analytic normal when the shape provides one, else central FD."""
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        if hasattr(self.shape, "normal"):
            return self.shape.normal(pts)
        g = np.empty_like(pts)
        for a in range(3):
            hi = pts.copy()
            lo = pts.copy()
            hi[:, a] += fd_step
            lo[:, a] -= fd_step
            g[:, a] = (self.shape.sdf(hi) - self.shape.sdf(lo)) / (2 * fd_step)
        nrm = np.linalg.norm(g, axis=-1, keepdims=True)
        if np.any(nrm < 1e-12):
            raise SingularNormalError("FD normal degenerate")
        return g / nrm

    def normal_or_default(self, pts: np.ndarray, default=(0.0, 0.0, 1.0)) -> np.ndarray:
        """Batch normals with a fixed substitute wherever the gradient degenerates."""
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        g = np.empty_like(pts)
        h = 1e-5
        for a in range(3):
            hi = pts.copy()
            lo = pts.copy()
            hi[:, a] += h
            lo[:, a] -= h
            g[:, a] = (self.shape.sdf(hi) - self.shape.sdf(lo)) / (2 * h)
        nrm = np.linalg.norm(g, axis=-1)
        ok = nrm > 1e-9
        out = np.tile(np.asarray(default, dtype=np.float64), (len(pts), 1))
        out[ok] = g[ok] / nrm[ok, None]
        return out

    def color(self, x: np.ndarray, v: np.ndarray, n: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        v = np.atleast_2d(np.asarray(v, dtype=np.float64))
        n = np.atleast_2d(np.asarray(n, dtype=np.float64))
        return self.color_model.color(x, v, n)


def teacher_sdf(t: AnalyticTeacher, x) -> np.ndarray:
    return t.sdf(x)


def teacher_normal(t: AnalyticTeacher, x) -> np.ndarray:
    return t.normal(x)


def teacher_color(t: AnalyticTeacher, x, v, n) -> np.ndarray:
    return t.color(x, v, n)


# ---------------------------------------------------------------------------
# samplers


def sample_bbox_uniform(cfg: GridConfig, m: int, seed) -> np.ndarray:
    """m i.i.d. points uniform over the grid bounding box; fixed per seed."""
    if m <= 0:
        raise ValueError("sample count must be > 0")
    rng = np.random.default_rng(seed)
    return rng.uniform(cfg.bbox_min, cfg.bbox_max, size=(m, 3))


def sample_hemisphere(n: np.ndarray, seed) -> np.ndarray:
    """Directions uniform (area measure) over the hemisphere about each normal.

    n may be a single unit 3-vector or an (m, 3) batch; output matches and
    satisfies v . n >= 0.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = np.asarray(n, dtype=np.float64)
    single = n.ndim == 1
    normals = n[None, :] if single else n
    m = len(normals)
    u1 = rng.uniform(0.0, 1.0, m)  # cos(theta) is uniform for area measure
    u2 = rng.uniform(0.0, 1.0, m)
    r = np.sqrt(np.maximum(0.0, 1.0 - u1 * u1))
    phi = 2.0 * np.pi * u2
    local = np.stack([r * np.cos(phi), r * np.sin(phi), u1], axis=1)
    t, b = orthonormal_tangents(normals)
    v = local[:, :1] * t + local[:, 1:2] * b + local[:, 2:3] * normals
    return v[0] if single else v


def orthonormal_tangents(n: np.ndarray):
    """A tangent/bitangent pair completing each unit normal to a right-handed frame."""
    n = np.atleast_2d(n)
    helper = np.where(np.abs(n[:, 2:3]) < 0.9, [[0.0, 0.0, 1.0]], [[1.0, 0.0, 0.0]])
    t = np.cross(helper, n)
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    b = np.cross(n, t)
    return t, b
