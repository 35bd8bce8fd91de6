"""Primary-visibility renderer: AABB slabs, sphere tracing, shading passes.

The tracer works on any "traceable" surface: an object exposing a bounding
box, batched signed distances, and a shade() that returns colors/normals at
hit points. Both the learned grid field and the analytic teachers provide
this interface, so oracle comparisons run through the exact same march.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import grid as gridmod
from .cameras import CameraPose, pixel_rays

PASS_COLOR = "color"
PASS_NORMAL = "normal"
PASS_DEPTH = "depth"
PASSES = (PASS_COLOR, PASS_NORMAL, PASS_DEPTH)

DEPTH_MISS = np.inf


class RenderAborted(RuntimeError):
    """Frame rendering stopped early by the abort callback."""


def thread_count() -> int:
    env = os.environ.get("KNF_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return max(1, os.cpu_count() or 1)


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        n = np.linalg.norm(self.direction)
        if not np.isclose(n, 1.0, atol=1e-6):
            raise ValueError("ray direction must be unit length")


@dataclass
class Hit:
    t: float
    position: np.ndarray
    normal: np.ndarray
    color: np.ndarray
    steps_taken: int


@dataclass
class RenderSettings:
    eps_hit: float = 1e-3
    max_steps: int = 128
    step_scale: float = 0.8
    render_pass: str = PASS_COLOR

    def __post_init__(self):
        if not (0 < self.step_scale <= 1):
            raise ValueError("step_scale must be in (0, 1]")
        if self.render_pass not in PASSES:
            raise ValueError(f"unknown pass {self.render_pass!r}")


# ---------------------------------------------------------------------------
# traceables


class FieldSurface:
    """Adapter exposing a KiloField to the tracer."""

    def __init__(self, kfield):
        self.field = kfield
        self.bbox_min = kfield.config.bbox_min
        self.bbox_max = kfield.config.bbox_max

    def sdf_values(self, pts: np.ndarray) -> np.ndarray:
        return gridmod.sdf_values(self.field, pts).astype(np.float64)

    def shade(self, pts: np.ndarray, view_dirs: np.ndarray):
        normals, ok = gridmod.normal_batch(self.field, pts)
        # degenerate gradient: fall back to facing the ray
        normals[~ok] = -view_dirs[~ok]
        sample = gridmod.sdf_query(self.field, pts)
        colors = gridmod.color_query(self.field, pts, view_dirs, normals, sample.features)
        return colors.astype(np.float64), normals


class TeacherSurface:
    """Adapter running an analytic teacher through the same tracer."""

    def __init__(self, teacher, bbox_min=(-1.0, -1.0, -1.0), bbox_max=(1.0, 1.0, 1.0)):
        self.teacher = teacher
        self.bbox_min = np.asarray(bbox_min, dtype=np.float64)
        self.bbox_max = np.asarray(bbox_max, dtype=np.float64)

    def sdf_values(self, pts: np.ndarray) -> np.ndarray:
        return self.teacher.sdf(pts)

    def shade(self, pts: np.ndarray, view_dirs: np.ndarray):
        normals = self.teacher.normal_or_default(pts)
        colors = self.teacher.color(pts, view_dirs, normals)
        return colors, normals


# ---------------------------------------------------------------------------
# intersection and marching


def ray_aabb(ray: Ray, bbox_min, bbox_max):
    """Slab intersection; returns (t_near, t_far) with t_near >= 0, or None."""
    t0, t1, hit = ray_aabb_batch(ray.origin[None, :], ray.direction[None, :], bbox_min, bbox_max)
    if not hit[0]:
        return None
    return float(t0[0]), float(t1[0])


def ray_aabb_batch(origins: np.ndarray, dirs: np.ndarray, bbox_min, bbox_max):
    bmin = np.asarray(bbox_min, dtype=np.float64)
    bmax = np.asarray(bbox_max, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        lo = (bmin - origins) * inv
        hi = (bmax - origins) * inv
    enter = np.minimum(lo, hi)
    leave = np.maximum(lo, hi)
    # parallel rays: inside the slab -> no constraint, outside -> blocked
    par = dirs == 0.0
    if np.any(par):
        inside = (origins >= bmin) & (origins <= bmax)
        enter = np.where(par, np.where(inside, -np.inf, np.inf), enter)
        leave = np.where(par, np.where(inside, np.inf, -np.inf), leave)
    tmin = np.max(enter, axis=1)
    tmax = np.min(leave, axis=1)
    hit = (tmax >= tmin) & (tmax >= 0)
    return np.maximum(tmin, 0.0), tmax, hit


@dataclass
class TraceResult:
    hit: np.ndarray  # (n,) bool
    t: np.ndarray  # (n,) hit distance, undefined where miss
    position: np.ndarray  # (n, 3)
    steps: np.ndarray  # (n,) int
    normal: np.ndarray | None = None
    color: np.ndarray | None = None


def march_rays(surface, origins: np.ndarray, dirs: np.ndarray, t_near: np.ndarray, t_far: np.ndarray, settings: RenderSettings) -> TraceResult:
    """Lockstep sphere tracing of a ray batch over [t_near, t_far].

    Steps advance by step_scale * max(d, eps_hit/2); a ray converges when
    |d| <= eps_hit and then gets one secant refinement between the last two
    samples (kept only if it does not worsen |d|).
    """
    n = len(origins)
    eps = settings.eps_hit
    t = t_near.copy()
    active = t_near < t_far
    hit = np.zeros(n, dtype=bool)
    steps = np.zeros(n, dtype=np.int32)
    t_hit = np.zeros(n)
    d_hit = np.zeros(n)
    t_prev = np.full(n, np.nan)
    d_prev = np.full(n, np.nan)

    for _ in range(settings.max_steps):
        idx = np.nonzero(active)[0]
        if len(idx) == 0:
            break
        pts = origins[idx] + t[idx, None] * dirs[idx]
        d = surface.sdf_values(pts)
        steps[idx] += 1

        conv = np.abs(d) <= eps
        cidx = idx[conv]
        if len(cidx) > 0:
            tc = t[cidx]
            dc = d[conv]
            tp = t_prev[cidx]
            dp = d_prev[cidx]
            refined = tc.copy()
            ok = np.isfinite(tp) & (np.abs(dc - dp) > 1e-12)
            refined[ok] = tc[ok] - dc[ok] * (tc[ok] - tp[ok]) / (dc[ok] - dp[ok])
            # allow at most one interval of forward extrapolation toward the root
            lo = np.minimum(tc, tp)
            hi = np.maximum(tc, tp)
            refined[ok] = np.clip(refined[ok], lo[ok], hi[ok] + (hi[ok] - lo[ok]))
            if np.any(ok):
                d_ref = surface.sdf_values(origins[cidx[ok]] + refined[ok, None] * dirs[cidx[ok]])
                worse = np.abs(d_ref) > np.abs(dc[ok])
                sub = np.nonzero(ok)[0][worse]
                refined[sub] = tc[sub]
                d_fill = dc[ok].copy()
                d_fill[~worse] = d_ref[~worse]
                dtmp = dc.copy()
                dtmp[ok] = d_fill
                dc = dtmp
            hit[cidx] = True
            t_hit[cidx] = refined
            d_hit[cidx] = dc
            active[cidx] = False

        mov = idx[~conv]
        if len(mov) > 0:
            t_prev[mov] = t[mov]
            d_prev[mov] = d[~conv]
            t[mov] = t[mov] + settings.step_scale * np.maximum(d[~conv], eps / 2)
            passed = t[mov] > t_far[mov]
            active[mov[passed]] = False

    position = origins + t_hit[:, None] * dirs
    return TraceResult(hit=hit, t=t_hit, position=position, steps=steps)


def trace_and_shade(surface, origins, dirs, settings: RenderSettings) -> TraceResult:
    t_near, t_far, box = ray_aabb_batch(origins, dirs, surface.bbox_min, surface.bbox_max)
    t_near = np.where(box, t_near, 1.0)
    t_far = np.where(box, t_far, 0.0)
    res = march_rays(surface, origins, dirs, t_near, t_far, settings)
    res.normal = np.zeros_like(origins)
    res.color = np.zeros_like(origins)
    if np.any(res.hit):
        h = res.hit
        colors, normals = surface.shade(res.position[h], dirs[h])
        res.color[h] = np.clip(colors, 0.0, 1.0)
        res.normal[h] = normals
    return res


def sphere_trace(surface, ray: Ray, t_near: float, t_far: float, settings: RenderSettings) -> Hit | None:
    """Single-ray march over [t_near, t_far]; returns None on a miss."""
    if not t_near < t_far:
        raise ValueError("need t_near < t_far")
    res = march_rays(surface, ray.origin[None, :], ray.direction[None, :], np.array([t_near]), np.array([t_far]), settings)
    if not res.hit[0]:
        return None
    colors, normals = surface.shade(res.position[:1], ray.direction[None, :])
    return Hit(
        t=float(res.t[0]),
        position=res.position[0],
        normal=normals[0],
        color=np.clip(colors[0], 0.0, 1.0),
        steps_taken=int(res.steps[0]),
    )


# ---------------------------------------------------------------------------
# frame rendering


@dataclass
class FrameBuffers:
    color: np.ndarray  # (H, W, 3) float32, background composited
    depth: np.ndarray  # (H, W) float32, +inf at misses
    normal: np.ndarray  # (H, W, 3) float32, zeros at misses
    hit: np.ndarray  # (H, W) bool


def render_frame(
    surface,
    pose: CameraPose,
    settings: RenderSettings | None = None,
    background=(1.0, 1.0, 1.0),
    supersample: int = 1,
    tile_rows: int = 32,
    abort_check=None,
) -> FrameBuffers:
    """Full-frame sphere-traced render with color/depth/normal buffers.

    Rows are rendered in fixed bands, possibly on several threads; every
    pixel is a pure function of its ray so output is identical for any
    thread count. With supersample=k the color buffer averages k*k subrays;
    depth/normal keep the closest subsample so normals stay unit length.
    """
    settings = settings or RenderSettings()
    if supersample < 1:
        raise ValueError("supersample must be >= 1")
    bg = np.asarray(background, dtype=np.float64)
    W, H, ss = pose.width, pose.height, supersample
    hi_pose = CameraPose(pose.position, pose.rotation, pose.fov_y, W * ss, H * ss)

    color = np.empty((H, W, 3), dtype=np.float32)
    depth = np.full((H, W), DEPTH_MISS, dtype=np.float32)
    normal_buf = np.zeros((H, W, 3), dtype=np.float32)
    hit_buf = np.zeros((H, W), dtype=bool)
    aborted = []

    def render_band(row0: int, row1: int):
        if aborted or (abort_check is not None and abort_check()):
            aborted.append(True)
            return
        cols, rows = np.meshgrid(np.arange(W * ss), np.arange(row0 * ss, row1 * ss))
        pix = np.stack([cols.ravel(), rows.ravel()], axis=1)
        origins, dirs = pixel_rays(hi_pose, pix)
        res = trace_and_shade(surface, origins, dirs, settings)
        bh = row1 - row0
        shape = (bh, ss, W, ss)
        chit = res.hit.reshape(shape)
        ccol = np.where(res.hit[:, None], res.color, bg[None, :]).reshape(shape + (3,))
        cdep = np.where(res.hit, res.t, DEPTH_MISS).reshape(shape)
        cnrm = res.normal.reshape(shape + (3,))
        color[row0:row1] = ccol.mean(axis=(1, 3))
        # closest subsample represents depth and normal
        flat_dep = cdep.transpose(0, 2, 1, 3).reshape(bh, W, ss * ss)
        best = np.argmin(flat_dep, axis=2)
        ii, jj = np.meshgrid(np.arange(bh), np.arange(W), indexing="ij")
        depth[row0:row1] = flat_dep[ii, jj, best]
        flat_nrm = cnrm.transpose(0, 2, 1, 3, 4).reshape(bh, W, ss * ss, 3)
        normal_buf[row0:row1] = flat_nrm[ii, jj, best]
        hit_buf[row0:row1] = chit.transpose(0, 2, 1, 3).reshape(bh, W, ss * ss)[ii, jj, best]

    bands = [(r, min(r + tile_rows, H)) for r in range(0, H, tile_rows)]
    workers = thread_count()
    if workers > 1 and len(bands) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda b: render_band(*b), bands))
    else:
        for b in bands:
            render_band(*b)
    if aborted:
        raise RenderAborted("camera or settings changed")
    return FrameBuffers(color=color, depth=depth, normal=normal_buf, hit=hit_buf)


def pass_image(buffers: FrameBuffers, render_pass: str, background=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Displayable float RGB in [0,1] for the chosen pass."""
    if render_pass == PASS_COLOR:
        return buffers.color.astype(np.float64)
    if render_pass == PASS_NORMAL:
        img = 0.5 * (buffers.normal.astype(np.float64) + 1.0)
        img[~buffers.hit] = 0.0
        return img
    if render_pass == PASS_DEPTH:
        g = np.where(np.isfinite(buffers.depth), 1.0 / (1.0 + buffers.depth), 0.0)
        return np.repeat(g[:, :, None], 3, axis=2)
    raise ValueError(f"unknown pass {render_pass!r}")
