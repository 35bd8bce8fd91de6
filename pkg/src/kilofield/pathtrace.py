"""Monte Carlo path tracer over mixed scenes: analytic primitives plus
neural grid objects treated as Lambertian surfaces.

Sampling randomness comes from a counter-based hash RNG, so every
(seed, pixel, sample, slot) tuple addresses one uniform deterministically.
The batched renderer and the single-ray trace_path therefore consume
identical streams and agree bit for bit.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .cameras import CameraPose, pixel_rays
from .surface import FieldSurface, RenderSettings, march_rays, ray_aabb_batch, thread_count
from .teacher import orthonormal_tangents

_GOLD = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

RR_START_BOUNCE = 3
RR_MIN, RR_MAX = 0.05, 0.95
_PRIMARY_SLOT = 1 << 20  # jitter slots, disjoint from bounce slots


def _mix64(x: np.ndarray) -> np.ndarray:
    # uint64 wrap-around is the point here
    x = (x ^ (x >> np.uint64(30))) * _M1
    x = (x ^ (x >> np.uint64(27))) * _M2
    return x ^ (x >> np.uint64(31))


@dataclass
class Rng:
    """Counter-based uniform source: value = hash(seed, pixel, sample, slot)."""

    seed: int

    def uniform(self, pixel, sample, slot):
        with np.errstate(over="ignore"):
            h = _mix64(np.asarray(np.uint64(self.seed & 0xFFFFFFFFFFFFFFFF)) + _GOLD)
            for c in (pixel, sample, slot):
                c = np.asarray(c, dtype=np.uint64)
                h = _mix64(h ^ (c * _GOLD + _M2))
        return (h >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


# ---------------------------------------------------------------------------
# materials, environments, objects


@dataclass
class Lambertian:
    albedo: tuple = (0.5, 0.5, 0.5)

    def __post_init__(self):
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        if np.any(self.albedo < 0) or np.any(self.albedo > 1):
            raise ValueError("albedo must lie in [0, 1]")


@dataclass
class Emissive:
    radiance: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.radiance = np.asarray(self.radiance, dtype=np.float64)
        if np.any(self.radiance < 0):
            raise ValueError("radiance must be non-negative")


@dataclass
class ConstantEnv:
    rgb: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)

    def radiance(self, dirs: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.rgb, dirs.shape).copy()


@dataclass
class LatLongEnvMap:
    """Equirectangular environment: u wraps around the y axis, v = polar angle."""

    image: np.ndarray  # (H, W, 3) float

    def radiance(self, dirs: np.ndarray) -> np.ndarray:
        img = self.image
        H, W = img.shape[:2]
        u = 0.5 + np.arctan2(dirs[:, 2], dirs[:, 0]) / (2 * np.pi)
        v = np.arccos(np.clip(dirs[:, 1], -1.0, 1.0)) / np.pi
        x = np.clip(u * W - 0.5, 0, W - 1)
        y = np.clip(v * H - 0.5, 0, H - 1)
        x0 = np.floor(x).astype(int)
        y0 = np.floor(y).astype(int)
        x1 = np.minimum(x0 + 1, W - 1)
        y1 = np.minimum(y0 + 1, H - 1)
        fx = (x - x0)[:, None]
        fy = (y - y0)[:, None]
        c = (
            img[y0, x0] * (1 - fx) * (1 - fy)
            + img[y0, x1] * fx * (1 - fy)
            + img[y1, x0] * (1 - fx) * fy
            + img[y1, x1] * fx * fy
        )
        return c.astype(np.float64)


@dataclass
class SphereObj:
    center: tuple
    radius: float
    material: object

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        if self.radius <= 0:
            raise ValueError("radius must be > 0")

    def intersect_t(self, o, d, t_max):
        oc = o - self.center
        b = np.sum(oc * d, axis=1)
        c = np.sum(oc * oc, axis=1) - self.radius**2
        disc = b * b - c
        t = np.full(len(o), np.inf)
        ok = disc >= 0
        if np.any(ok):
            sq = np.sqrt(disc[ok])
            t0 = -b[ok] - sq
            t1 = -b[ok] + sq
            tt = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
            t[ok] = tt
        t[t > t_max] = np.inf
        return t

    def surface_at(self, pos, d):
        n = (pos - self.center) / self.radius
        n = np.where(np.sum(n * d, axis=1, keepdims=True) > 0, -n, n)
        return n


@dataclass
class QuadObj:
    """Parallelogram: corner + s*edge_u + t*edge_v for s, t in [0, 1]."""

    corner: tuple
    edge_u: tuple
    edge_v: tuple
    material: object

    def __post_init__(self):
        self.corner = np.asarray(self.corner, dtype=np.float64)
        self.edge_u = np.asarray(self.edge_u, dtype=np.float64)
        self.edge_v = np.asarray(self.edge_v, dtype=np.float64)
        n = np.cross(self.edge_u, self.edge_v)
        ln = np.linalg.norm(n)
        if ln < 1e-12:
            raise ValueError("degenerate quad")
        self._normal = n / ln

    def intersect_t(self, o, d, t_max):
        n = self._normal
        denom = d @ n
        t = np.full(len(o), np.inf)
        ok = np.abs(denom) > 1e-12
        if np.any(ok):
            tt = ((self.corner - o[ok]) @ n) / denom[ok]
            pos = o[ok] + tt[:, None] * d[ok]
            rel = pos - self.corner
            uu = self.edge_u / (self.edge_u @ self.edge_u)
            vv = self.edge_v / (self.edge_v @ self.edge_v)
            su = rel @ uu
            sv = rel @ vv
            inside = (tt > 1e-9) & (su >= 0) & (su <= 1) & (sv >= 0) & (sv <= 1)
            tfill = np.where(inside, tt, np.inf)
            t[ok] = tfill
        t[t > t_max] = np.inf
        return t

    def surface_at(self, pos, d):
        n = np.broadcast_to(self._normal, pos.shape).copy()
        flip = np.sum(n * d, axis=1) > 0
        n[flip] = -n[flip]
        return n


@dataclass
class BoxObj:
    bmin: tuple
    bmax: tuple
    material: object

    def __post_init__(self):
        self.bmin = np.asarray(self.bmin, dtype=np.float64)
        self.bmax = np.asarray(self.bmax, dtype=np.float64)
        if not np.all(self.bmin < self.bmax):
            raise ValueError("bmin must be < bmax")

    def intersect_t(self, o, d, t_max):
        tn, tf, hit = ray_aabb_batch(o, d, self.bmin, self.bmax)
        t = np.where(hit & (tn > 1e-9), tn, np.where(hit & (tf > 1e-9), tf, np.inf))
        t[t > t_max] = np.inf
        return t

    def surface_at(self, pos, d):
        # face with the smallest wall distance
        dist = np.stack([np.abs(pos - self.bmin), np.abs(pos - self.bmax)], axis=1)  # (n, 2, 3)
        flat = dist.reshape(len(pos), 6)
        face = np.argmin(flat, axis=1)
        n = np.zeros_like(pos)
        axis = face % 3
        sign = np.where(face < 3, -1.0, 1.0)
        n[np.arange(len(pos)), axis] = sign
        flip = np.sum(n * d, axis=1) > 0
        n[flip] = -n[flip]
        return n


@dataclass
class NeuralObject:
    """A trained grid field placed in the scene by a rigid + uniform-scale map."""

    surface: FieldSurface
    translation: tuple = (0.0, 0.0, 0.0)
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    scale: float = 1.0
    settings: RenderSettings = field(default_factory=RenderSettings)

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(3), atol=1e-6):
            raise ValueError("rotation must be orthonormal")
        if self.scale <= 0:
            raise ValueError("scale must be > 0")

    def to_local(self, o, d):
        ol = (o - self.translation) @ self.rotation / self.scale
        dl = d @ self.rotation
        return ol, dl

    def intersect_t(self, o, d, t_max):
        """Sphere-trace the field in its local frame; aux carries the march hits."""
        ol, dl = self.to_local(o, d)
        tn, tf, hit = ray_aabb_batch(ol, dl, self.surface.bbox_min, self.surface.bbox_max)
        t = np.full(len(o), np.inf)
        idx = np.nonzero(hit & (tn < tf))[0]
        if len(idx) == 0:
            return t, None
        res = march_rays(self.surface, ol[idx], dl[idx], tn[idx], tf[idx], self.settings)
        t_world = res.t * self.scale
        t[idx[res.hit]] = t_world[res.hit]
        t[t > t_max] = np.inf
        return t, {"idx": idx, "res": res}

    def surface_at_indices(self, lanes, o, d, aux):
        """Normals and albedo for the winning lanes of the matching intersect_t call."""
        _, dl = self.to_local(o, d)
        res = aux["res"]
        lookup = {int(g): k for k, g in enumerate(aux["idx"])}
        sel = np.array([lookup[int(l)] for l in lanes], dtype=int)
        pos_local = res.position[sel]
        colors, normals = self.surface.shade(pos_local, dl[lanes])
        n_world = normals @ self.rotation.T
        n_world /= np.linalg.norm(n_world, axis=1, keepdims=True)
        flip = np.sum(n_world * d[lanes], axis=1) > 0
        n_world[flip] = -n_world[flip]
        return n_world, np.clip(colors, 0.0, 1.0)


@dataclass
class Scene:
    objects: list
    environment: object = field(default_factory=ConstantEnv)


# ---------------------------------------------------------------------------
# sampling


def sample_lambertian(n: np.ndarray, rng_pair) -> tuple[np.ndarray, np.ndarray]:
    """Cosine-weighted hemisphere direction(s) about n; pdf = cos(theta)/pi.

    rng_pair is (u1, u2) uniforms, scalars or arrays matching the batch.
    """
    u1, u2 = rng_pair
    n = np.atleast_2d(np.asarray(n, dtype=np.float64))
    u1 = np.atleast_1d(np.asarray(u1, dtype=np.float64))
    u2 = np.atleast_1d(np.asarray(u2, dtype=np.float64))
    r = np.sqrt(u1)
    phi = 2 * np.pi * u2
    cos_t = np.sqrt(np.maximum(0.0, 1.0 - u1))
    t, b = orthonormal_tangents(n)
    d = (r * np.cos(phi))[:, None] * t + (r * np.sin(phi))[:, None] * b + cos_t[:, None] * n
    pdf = cos_t / np.pi
    if d.shape[0] == 1 and np.asarray(rng_pair[0]).ndim == 0:
        return d[0], float(pdf[0])
    return d, pdf


# ---------------------------------------------------------------------------
# tracing


def intersect_scene(scene: Scene, origins: np.ndarray, dirs: np.ndarray, t_max: float = np.inf):
    """Nearest hit per ray over all objects.

    Returns (t, obj_index, aux_per_object) with t = inf and index -1 where
    nothing is hit; aux entries let neural objects shade without re-marching.
    """
    n = len(origins)
    best_t = np.full(n, np.inf)
    best_obj = np.full(n, -1, dtype=int)
    auxes = []
    for oi, obj in enumerate(scene.objects):
        if isinstance(obj, NeuralObject):
            t, aux = obj.intersect_t(origins, dirs, t_max)
        else:
            t, aux = obj.intersect_t(origins, dirs, t_max), None
        auxes.append(aux)
        closer = t < best_t
        best_t[closer] = t[closer]
        best_obj[closer] = oi
    return best_t, best_obj, auxes


def _hit_bias(obj) -> float:
    # neural surfaces need clearance beyond the hit tolerance; analytic ones do not
    if isinstance(obj, NeuralObject):
        return 4.0 * obj.settings.eps_hit
    return 1e-6


def _trace_batch(scene: Scene, origins, dirs, pixel_ids, sample_idx, rng: Rng, max_bounces: int):
    n = len(origins)
    radiance = np.zeros((n, 3))
    throughput = np.ones((n, 3))
    active = np.ones(n, dtype=bool)
    o = origins.copy()
    d = dirs.copy()

    for bounce in range(max_bounces + 1):
        if not np.any(active):
            break
        idx = np.nonzero(active)[0]
        t, obj_id, auxes = intersect_scene(scene, o[idx], d[idx])

        miss = ~np.isfinite(t)
        if np.any(miss):
            esc = idx[miss]
            radiance[esc] += throughput[esc] * scene.environment.radiance(d[esc])
            active[esc] = False

        if bounce == max_bounces:
            active[idx[~miss]] = False
            break

        normals = np.zeros((len(idx), 3))
        albedo = np.zeros((len(idx), 3))
        emitted = np.zeros((len(idx), 3))
        is_lambert = np.zeros(len(idx), dtype=bool)
        bias = np.full(len(idx), 1e-6)
        pos = o[idx] + np.where(np.isfinite(t), t, 0.0)[:, None] * d[idx]
        for oi, obj in enumerate(scene.objects):
            w = np.nonzero(obj_id == oi)[0]
            if len(w) == 0:
                continue
            if isinstance(obj, NeuralObject):
                nrm, alb = obj.surface_at_indices(w, o[idx], d[idx], auxes[oi])
                normals[w] = nrm
                albedo[w] = alb
                is_lambert[w] = True
            else:
                normals[w] = obj.surface_at(pos[w], d[idx[w]])
                mat = obj.material
                if isinstance(mat, Emissive):
                    emitted[w] = mat.radiance
                else:
                    albedo[w] = mat.albedo
                    is_lambert[w] = True
            bias[w] = _hit_bias(obj)

        hit_rows = ~miss
        emis_rows = hit_rows & ~is_lambert
        if np.any(emis_rows):
            er = idx[emis_rows]
            radiance[er] += throughput[er] * emitted[emis_rows]
            active[er] = False

        lam_rows = hit_rows & is_lambert
        if not np.any(lam_rows):
            continue
        lanes = idx[lam_rows]
        throughput[lanes] *= albedo[lam_rows]

        # russian roulette: slot layout is (bounce*3 + {0 rr, 1 u1, 2 u2})
        if bounce >= RR_START_BOUNCE:
            p = np.clip(throughput[lanes].max(axis=1), RR_MIN, RR_MAX)
            u = rng.uniform(pixel_ids[lanes], sample_idx, bounce * 3)
            dead = u > p
            active[lanes[dead]] = False
            lanes = lanes[~dead]
            if len(lanes) == 0:
                continue
            throughput[lanes] /= p[~dead][:, None]

        sel = np.isin(idx, lanes)
        u1 = rng.uniform(pixel_ids[lanes], sample_idx, bounce * 3 + 1)
        u2 = rng.uniform(pixel_ids[lanes], sample_idx, bounce * 3 + 2)
        new_d, _ = sample_lambertian(normals[sel], (u1, u2))
        o[lanes] = pos[sel] + normals[sel] * bias[sel][:, None]
        d[lanes] = new_d

    return radiance


def trace_path(scene: Scene, ray, rng: Rng, max_bounces: int = 8, pixel: int = 0, sample: int = 0) -> np.ndarray:
    """Radiance along one camera ray; cosine sampling cancels the Lambertian cos/pi."""
    o = np.asarray(ray.origin, dtype=np.float64)[None, :]
    d = np.asarray(ray.direction, dtype=np.float64)[None, :]
    return _trace_batch(scene, o, d, np.array([pixel]), sample, rng, max_bounces)[0]


@dataclass
class PathtraceResult:
    hdr: np.ndarray  # (H, W, 3) float64 mean radiance
    ldr: np.ndarray  # (H, W, 3) float64 in [0, 1], gamma 2.2


def render_pathtraced(scene: Scene, pose: CameraPose, spp: int, seed: int, max_bounces: int = 8, tile_rows: int = 64, sample_offset: int = 0) -> PathtraceResult:
    """Per-pixel mean over spp independent paths, jittered through the pinhole.

    Rays are traced in lockstep over row bands; per-pixel counter RNG makes
    the result identical for any banding or thread count. sample_offset
    shifts the sample indices so progressive callers can keep accumulating
    fresh paths across calls.
    """
    if spp < 1:
        raise ValueError("spp must be >= 1")
    rng = Rng(seed)
    W, H = pose.width, pose.height
    hdr = np.zeros((H, W, 3))

    def render_band(row0, row1):
        cols, rows = np.meshgrid(np.arange(W), np.arange(row0, row1))
        pix = np.stack([cols.ravel(), rows.ravel()], axis=1)
        pixel_ids = (pix[:, 1] * W + pix[:, 0]).astype(np.uint64)
        acc = np.zeros((len(pix), 3))
        for s in range(sample_offset, sample_offset + spp):
            jx = rng.uniform(pixel_ids, s, _PRIMARY_SLOT)
            jy = rng.uniform(pixel_ids, s, _PRIMARY_SLOT + 1)
            origins, dirs = pixel_rays(pose, pix, jitter=np.stack([jx, jy], axis=1))
            acc += _trace_batch(scene, origins, dirs, pixel_ids, s, rng, max_bounces)
        hdr[row0:row1] = (acc / spp).reshape(row1 - row0, W, 3)

    bands = [(r, min(r + tile_rows, H)) for r in range(0, H, tile_rows)]
    workers = thread_count()
    if workers > 1 and len(bands) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda b: render_band(*b), bands))
    else:
        for b in bands:
            render_band(*b)
    ldr = np.clip(hdr, 0.0, 1.0) ** (1.0 / 2.2)
    return PathtraceResult(hdr=hdr, ldr=ldr)
