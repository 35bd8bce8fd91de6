"""Two-phase optimization: distillation from an analytic teacher, then
fine-tuning through a differentiable SDF-to-density volume renderer with
finite-difference eikonal regularization.

All gradients are hand-derived reverse mode on top of the grouped grid
dispatch. Normals fed to the color net are treated as constants during
backprop; feature vectors are differentiated through into the SDF nets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import grid as gridmod
from . import nn
from .cameras import CameraPose, pixel_rays, poses_on_sphere
from .grid import KiloField, MlpGrid, Routing, _fd_probes
from .surface import RenderSettings, TeacherSurface, ray_aabb_batch, render_frame
from .teacher import AnalyticTeacher, sample_bbox_uniform, sample_hemisphere

PHI_FLOOR = 1e-12  # guards the opacity ratio where the sigmoid underflows


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; message carries the step index."""


@dataclass
class DistillConfig:
    steps: int = 20000
    batch: int = 4096
    lr: float = 1e-3
    lr_step_size: int = 10000
    lr_gamma: float = 0.75
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch <= 0:
            raise ValueError("steps must be >= 0 and batch > 0")


@dataclass
class FinetuneConfig:
    steps: int = 20000
    pixel_batch: int = 1024
    lr: float = 1e-4
    cosine_alpha: float = 0.05
    eikonal_samples: int = 16384
    eikonal_weight: float = 0.01
    samples_per_ray: int = 64
    init_s: float = 20.0
    # the deviation parameter is a single scalar steering the global surface
    # sharpness; at desk-scale step counts it needs a faster clock than the
    # MLP weights or the optimizer sharpens renders by inflating SDF
    # gradients instead (wrecking the distance property)
    s_lr_scale: float = 50.0
    seed: int = 0

    def __post_init__(self):
        if self.pixel_batch <= 0 or self.eikonal_samples <= 0 or self.samples_per_ray <= 0:
            raise ValueError("batch sizes must be > 0")
        if self.eikonal_weight < 0:
            raise ValueError("eikonal_weight must be >= 0")


@dataclass
class TrainImage:
    pixels: np.ndarray  # (H, W, 3) float32 in [0, 1]
    pose: CameraPose

    def __post_init__(self):
        if self.pixels.shape != (self.pose.height, self.pose.width, 3):
            raise ValueError("pixel array does not match the pose dimensions")


def lr_schedule(kind: str, base_lr: float, step: int, total: int, *, gamma: float = 0.75, step_size: int = 10000, alpha: float = 0.05) -> float:
    """Step decay (gamma every step_size) or cosine decay to alpha*base."""
    if not 0 <= step <= total:
        raise ValueError("need 0 <= step <= total")
    if kind == "step":
        return base_lr * gamma ** (step // step_size)
    if kind == "cosine":
        return base_lr * (alpha + (1 - alpha) * (1 + np.cos(np.pi * step / total)) / 2)
    raise ValueError(f"unknown schedule {kind!r}")


def s_density(d, s):
    """Logistic density phi_s(d) = s e^{-sd} / (1 + e^{-sd})^2, overflow-safe."""
    if s <= 0:
        raise ValueError("s must be > 0")
    x = np.abs(np.asarray(d, dtype=np.float64)) * s
    e = np.exp(-x)
    return s * e / (1.0 + e) ** 2


# ---------------------------------------------------------------------------
# optimizers over stacked grids


class GridAdam:
    """Adam over stacked per-cell parameters, updating only touched cells.

    Each cell keeps its own step count, so a cell skipped by a batch stays
    bit-identical (training is local to the cells that received samples).
    """

    def __init__(self, grid: MlpGrid, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.grid = grid
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in grid.param_arrays()]
        self.v = [np.zeros_like(p) for p in grid.param_arrays()]
        self.t = np.zeros(grid.n_cells, dtype=np.int64)

    def step(self, grads: list[np.ndarray], cells: np.ndarray, lr: float | None = None):
        lr = self.lr if lr is None else lr
        if len(cells) == 0:
            return
        for i, g in enumerate(grads):
            if not np.all(np.isfinite(g[cells])):
                raise FloatingPointError(f"non-finite gradient in grid tensor #{i}")
        self.t[cells] += 1
        t = self.t[cells]
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        params = self.grid.param_arrays()
        for p, g, m, v in zip(params, grads, self.m, self.v):
            shape = (len(cells),) + (1,) * (p.ndim - 1)
            gc = g[cells]
            m[cells] = self.beta1 * m[cells] + (1 - self.beta1) * gc
            v[cells] = self.beta2 * v[cells] + (1 - self.beta2) * np.square(gc)
            mc = m[cells] / c1.reshape(shape)
            vc = v[cells] / c2.reshape(shape)
            p[cells] -= lr * mc / (np.sqrt(vc) + self.eps)


class ScalarAdam:
    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = 0.0
        self.v = 0.0
        self.t = 0

    def step(self, param: np.ndarray, grad: float, lr: float | None = None):
        if not np.isfinite(grad):
            raise FloatingPointError("non-finite gradient for deviation parameter")
        lr = self.lr if lr is None else lr
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mc = self.m / (1 - self.beta1**self.t)
        vc = self.v / (1 - self.beta2**self.t)
        param -= lr * mc / (np.sqrt(vc) + self.eps)


@dataclass
class FieldGrads:
    """Stacked parameter gradients plus the sets of cells they touch."""

    sdf: list[np.ndarray]
    color: list[np.ndarray]
    inv_std: float
    sdf_cells: np.ndarray
    color_cells: np.ndarray

    @staticmethod
    def zeros(kfield: KiloField) -> "FieldGrads":
        empty = np.empty(0, dtype=np.int64)
        return FieldGrads(kfield.sdf.zero_grads(), kfield.color.zero_grads(), 0.0, empty, empty)

    def add_scaled(self, other: "FieldGrads", scale: float = 1.0):
        for a, b in zip(self.sdf, other.sdf):
            if len(other.sdf_cells):
                a[other.sdf_cells] += scale * b[other.sdf_cells]
        for a, b in zip(self.color, other.color):
            if len(other.color_cells):
                a[other.color_cells] += scale * b[other.color_cells]
        self.inv_std += scale * other.inv_std
        self.sdf_cells = np.union1d(self.sdf_cells, other.sdf_cells)
        self.color_cells = np.union1d(self.color_cells, other.color_cells)
        return self


# ---------------------------------------------------------------------------
# shared forward helpers


def _sdf_forward(kfield: KiloField, pts: np.ndarray, want_cache: bool):
    pts = np.ascontiguousarray(pts, dtype=kfield.dtype)
    routing = gridmod.route(kfield.config, pts)
    enc = nn.fourier_encode(routing.sort(pts), kfield.config.sdf_freqs)
    out_sorted, cache = gridmod.grid_forward(kfield.sdf, enc, routing, want_cache)
    return routing, routing.unsort(out_sorted), cache


def _color_forward(kfield: KiloField, x, v, n, z, want_cache: bool):
    x = np.ascontiguousarray(x, dtype=kfield.dtype)
    inp = np.concatenate(
        [
            x,
            nn.fourier_encode(np.ascontiguousarray(v, dtype=kfield.dtype), kfield.config.dir_freqs),
            np.asarray(n, dtype=kfield.dtype),
            np.asarray(z, dtype=kfield.dtype),
        ],
        axis=1,
    )
    routing = gridmod.route(kfield.config, x)
    out_sorted, cache = gridmod.grid_forward(kfield.color, routing.sort(inp), routing, want_cache)
    return routing, routing.unsort(out_sorted), cache


# ---------------------------------------------------------------------------
# distillation


def distill_loss(kfield: KiloField, teacher: AnalyticTeacher, x: np.ndarray, v: np.ndarray) -> float:
    """Mean over the batch of |d_hat - d| + ||c_hat - c||^2.

    v should be drawn from the hemisphere around the teacher normal at x;
    the student color net is fed the teacher's normals and its own features.
    """
    loss, _ = _distill_loss_and_grads(kfield, teacher, x, v, want_grads=False)
    return loss["total"]


def _distill_loss_and_grads(kfield: KiloField, teacher: AnalyticTeacher, x, v, want_grads: bool):
    x = np.atleast_2d(np.asarray(x))
    v = np.atleast_2d(np.asarray(v))
    m = len(x)
    n_hat = teacher.normal_or_default(x)
    d_hat = teacher.sdf(x)
    c_hat = teacher.color(x, v, n_hat)

    routing, sdf_out, sdf_cache = _sdf_forward(kfield, x, want_grads)
    d = sdf_out[:, 0].astype(np.float64)
    z = sdf_out[:, 1:]
    c_routing, c, color_cache = _color_forward(kfield, x, v, n_hat, z, want_grads)
    c64 = c.astype(np.float64)

    loss_sdf = float(np.mean(np.abs(d_hat - d)))
    loss_color = float(np.mean(np.sum((c_hat - c64) ** 2, axis=1)))
    losses = {"sdf": loss_sdf, "color": loss_color, "total": loss_sdf + loss_color}
    if not want_grads:
        return losses, None

    dtype = kfield.dtype
    g_c = (2.0 / m) * (c64 - c_hat)
    color_grads, g_color_in = gridmod.grid_backward(
        kfield.color, c_routing, color_cache, c_routing.sort(g_c.astype(dtype))
    )
    g_color_in = c_routing.unsort(g_color_in)
    g_z = g_color_in[:, -kfield.config.feature_dim :]

    g_sdf_out = np.empty((m, 1 + kfield.config.feature_dim), dtype=dtype)
    g_sdf_out[:, 0] = (np.sign(d - d_hat) / m).astype(dtype)
    g_sdf_out[:, 1:] = g_z
    sdf_grads, _ = gridmod.grid_backward(
        kfield.sdf, routing, sdf_cache, routing.sort(g_sdf_out), want_input_grad=False
    )
    grads = FieldGrads(sdf_grads, color_grads, 0.0, routing.cells, c_routing.cells)
    return losses, grads


def distill_run(kfield: KiloField, teacher: AnalyticTeacher, cfg: DistillConfig, log_every: int = 0):
    """Adam-optimize all touched cells against the teacher; returns the loss curve.

    Each step samples positions uniformly in the bbox and view directions
    from the hemisphere around the teacher normal; only cells owning sampled
    points receive updates.
    """
    rng = np.random.default_rng(cfg.seed)
    opt_sdf = GridAdam(kfield.sdf, cfg.lr)
    opt_color = GridAdam(kfield.color, cfg.lr)
    history = []
    for step in range(cfg.steps):
        lr = lr_schedule("step", cfg.lr, step, cfg.steps, gamma=cfg.lr_gamma, step_size=cfg.lr_step_size)
        x = rng.uniform(kfield.config.bbox_min, kfield.config.bbox_max, size=(cfg.batch, 3))
        n_hat = teacher.normal_or_default(x)
        v = sample_hemisphere(n_hat, rng)
        losses, grads = _distill_loss_and_grads(kfield, teacher, x, v, want_grads=True)
        if not np.isfinite(losses["total"]):
            raise TrainingDiverged(f"distillation diverged at step {step}")
        opt_sdf.step(grads.sdf, grads.sdf_cells, lr)
        opt_color.step(grads.color, grads.color_cells, lr)
        history.append({"step": step, "lr": lr, "loss_sdf": losses["sdf"], "loss_color": losses["color"], "loss": losses["total"]})
        if log_every and step % log_every == 0:
            print(f"[distill] step {step} lr {lr:.2e} sdf {losses['sdf']:.4f} color {losses['color']:.4f}")
    return history


# ---------------------------------------------------------------------------
# synthetic dataset


def make_dataset(
    teacher: AnalyticTeacher,
    n_views: int,
    resolution: int,
    seed: int,
    fov_y: float = 0.6911503837897545,
    radius: float = 2.5,
    background=(1.0, 1.0, 1.0),
    bbox_min=(-1.0, -1.0, -1.0),
    bbox_max=(1.0, 1.0, 1.0),
    supersample: int = 1,
) -> list[TrainImage]:
    """Sphere-trace the analytic teacher from cameras scattered on a sphere.

    Rays that miss the teacher get the constant background color; the whole
    dataset is a deterministic function of (teacher, arguments, seed).
    """
    if n_views <= 0:
        raise ValueError("n_views must be > 0")
    poses = poses_on_sphere(n_views, radius, fov_y, resolution, resolution, seed)
    surf = TeacherSurface(teacher, bbox_min, bbox_max)
    settings = RenderSettings(eps_hit=1e-4, max_steps=256)
    images = []
    for pose in poses:
        buffers = render_frame(surf, pose, settings, background=background, supersample=supersample)
        images.append(TrainImage(pixels=buffers.color, pose=pose))
    return images


# ---------------------------------------------------------------------------
# differentiable volume renderer


def _volume_forward(
    kfield: KiloField,
    origins: np.ndarray,
    dirs: np.ndarray,
    n_s: int,
    jitter: np.ndarray | None,
    background,
    frozen_normals: np.ndarray | None = None,
    want_grads: bool = False,
):
    """Render a ray batch through the S-density compositor.

    Opacity of each sample interval is the clamped relative drop of the
    sigmoid CDF of s*d between consecutive samples; colors are queried at
    the left sample of each interval with FD normals held constant.
    Returns float64 colors (B, 3) and, when want_grads, a cache for the
    backward pass.
    """
    cfg = kfield.config
    B = len(origins)
    bg = np.asarray(background, dtype=np.float64)
    t0, t1, box = ray_aabb_batch(origins, dirs, cfg.bbox_min, cfg.bbox_max)
    active = box & (t0 < t1)
    colors = np.tile(bg, (B, 1))
    if not np.any(active):
        return np.clip(colors, 0.0, 1.0), {"active": active, "B": B}

    A = int(active.sum())
    o = origins[active]
    d_ray = dirs[active]
    if jitter is None:
        jitter = np.full((B, n_s), 0.5)
    dt = ((t1 - t0)[active] / n_s)[:, None]
    ts = t0[active][:, None] + (np.arange(n_s)[None, :] + jitter[active]) * dt
    pts = (o[:, None, :] + ts[..., None] * d_ray[:, None, :]).reshape(-1, 3)

    routing, sdf_out, sdf_cache = _sdf_forward(kfield, pts, want_grads)
    dvals = sdf_out[:, 0].astype(np.float64).reshape(A, n_s)
    z = sdf_out[:, 1:].reshape(A, n_s, -1)

    m = n_s - 1
    pts_m = pts.reshape(A, n_s, 3)[:, :m].reshape(-1, 3)
    s = float(np.exp(kfield.inv_std_param))
    if frozen_normals is None:
        # FD normals only where the sample can influence the pixel: beyond
        # |d| > 20/s both the weight and the opacity derivative underflow,
        # so those samples keep a facing placeholder normal
        vrep = np.repeat(d_ray, m, axis=0)
        normals = -vrep.copy()
        near = np.abs(dvals[:, :m].reshape(-1)) <= 20.0 / s
        if np.any(near):
            nrm, ok = gridmod.normal_batch(kfield, pts_m[near])
            nrm[~ok] = -vrep[near][~ok]
            normals[near] = nrm
    else:
        normals = frozen_normals.reshape(-1, 3)
    v_in = np.repeat(d_ray, m, axis=0)
    c_routing, c_flat, color_cache = _color_forward(
        kfield, pts_m, v_in, normals, z[:, :m].reshape(-1, z.shape[-1]), want_grads
    )
    cvals = c_flat.astype(np.float64).reshape(A, m, 3)

    phi = _sigmoid64(s * dvals)
    phi_lead = np.maximum(phi[:, :m], PHI_FLOOR)
    ratio = (phi[:, :m] - phi[:, 1:]) / phi_lead
    alpha = np.clip(ratio, 0.0, 1.0)
    one_minus = 1.0 - alpha
    T_full = np.cumprod(one_minus, axis=1)
    T = np.concatenate([np.ones((A, 1)), T_full[:, :-1]], axis=1)
    w = T * alpha
    T_rem = T_full[:, -1]
    raw = (w[..., None] * cvals).sum(axis=1) + T_rem[:, None] * bg[None, :]
    clipped = np.clip(raw, 0.0, 1.0)
    colors[active] = clipped

    cache = None
    if want_grads:
        cache = {
            "active": active, "B": B, "A": A, "n_s": n_s, "bg": bg, "s": s,
            "routing": routing, "sdf_cache": sdf_cache, "dvals": dvals,
            "c_routing": c_routing, "color_cache": color_cache, "cvals": cvals,
            "phi": phi, "phi_lead": phi_lead, "ratio": ratio, "alpha": alpha,
            "T": T, "T_rem": T_rem, "w": w, "raw": raw,
            "feature_dim": kfield.config.feature_dim,
        }
    return colors, cache


def _sigmoid64(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _volume_backward(kfield: KiloField, cache: dict, grad_colors: np.ndarray) -> FieldGrads:
    """Reverse pass of _volume_forward for the active rays."""
    active = cache["active"]
    if "alpha" not in cache:  # nothing was rendered
        return FieldGrads.zeros(kfield)
    A, n_s, m = cache["A"], cache["n_s"], cache["n_s"] - 1
    bg, s = cache["bg"], cache["s"]
    alpha, T, T_rem, w = cache["alpha"], cache["T"], cache["T_rem"], cache["w"]
    phi, phi_lead, ratio = cache["phi"], cache["phi_lead"], cache["ratio"]
    cvals, dvals = cache["cvals"], cache["dvals"]
    dtype = kfield.dtype

    gC = grad_colors[active]
    # clip pass-through: zero where the compositing result was out of [0,1]
    raw = cache["raw"]
    gC = np.where((raw >= 0.0) & (raw <= 1.0), gC, 0.0)

    # color gradients
    g_c = w[..., None] * gC[:, None, :]

    # alpha gradients via suffix sums
    u = (cvals * gC[:, None, :]).sum(axis=2) * w  # (A, m)
    suffix = np.cumsum(u[:, ::-1], axis=1)[:, ::-1]
    after = np.concatenate([suffix[:, 1:], np.zeros((A, 1))], axis=1)
    g_bgdot = (bg * gC).sum(axis=1)
    after = after + (g_bgdot * T_rem)[:, None]
    g_alpha = (cvals * gC[:, None, :]).sum(axis=2) * T - after / np.maximum(1.0 - alpha, 1e-12)
    g_alpha = np.where((ratio > 0.0) & (ratio < 1.0), g_alpha, 0.0)

    # through the sigmoid CDF ratio; where the floor binds the denominator
    # is a constant, so only the numerator differentiates
    g_phi = np.zeros_like(phi)
    lead_free = phi[:, :m] > PHI_FLOOR
    g_phi[:, :m] += g_alpha * np.where(lead_free, phi[:, 1:] / phi_lead**2, 1.0 / phi_lead)
    g_phi[:, 1:] += -g_alpha / phi_lead
    dphi = phi * (1.0 - phi)
    g_d = g_phi * dphi * s
    g_inv_std = float((g_phi * dphi * dvals).sum() * s)

    # color net backward; z-grads feed the SDF feature channels
    F = cache["feature_dim"]
    c_routing, color_cache = cache["c_routing"], cache["color_cache"]
    color_grads, g_color_in = gridmod.grid_backward(
        kfield.color, c_routing, color_cache, c_routing.sort(g_c.reshape(-1, 3).astype(dtype))
    )
    g_z_m = c_routing.unsort(g_color_in)[:, -F:].reshape(A, m, F)

    g_sdf_out = np.zeros((A, n_s, 1 + F), dtype=dtype)
    g_sdf_out[:, :, 0] = g_d.astype(dtype)
    g_sdf_out[:, :m, 1:] = g_z_m.astype(dtype)
    routing, sdf_cache = cache["routing"], cache["sdf_cache"]
    sdf_grads, _ = gridmod.grid_backward(
        kfield.sdf, routing, sdf_cache, routing.sort(g_sdf_out.reshape(-1, 1 + F)), want_input_grad=False
    )
    return FieldGrads(sdf_grads, color_grads, g_inv_std, routing.cells, c_routing.cells)


def volume_render_ray(kfield: KiloField, ray, n_s: int = 64, stratified: bool = True, rng=None, background=(1.0, 1.0, 1.0)) -> np.ndarray:
    """RGB for one ray; rays missing the bbox return the background."""
    origins = np.asarray(ray.origin, dtype=np.float64)[None, :]
    dirs = np.asarray(ray.direction, dtype=np.float64)[None, :]
    jitter = None
    if stratified:
        rng = rng or np.random.default_rng(0)
        jitter = rng.uniform(size=(1, n_s))
    colors, _ = _volume_forward(kfield, origins, dirs, n_s, jitter, background)
    return colors[0]


# ---------------------------------------------------------------------------
# losses


def photometric_loss(kfield: KiloField, image: TrainImage, pixels: np.ndarray, n_s: int, rng, background=(1.0, 1.0, 1.0)) -> float:
    loss, _, _ = _photometric_loss_and_grads(kfield, image, pixels, n_s, rng, background, want_grads=False)
    return loss


def _photometric_loss_and_grads(kfield, image: TrainImage, pixels, n_s, rng, background, want_grads, jitter=None, frozen_normals=None):
    """L1 photometric loss over a pixel batch; returns (loss, grads, aux)."""
    pixels = np.asarray(pixels)
    B = len(pixels)
    origins, dirs = pixel_rays(image.pose, pixels)
    target = image.pixels[pixels[:, 1], pixels[:, 0]].astype(np.float64)
    if jitter is None:
        jitter = rng.uniform(size=(B, n_s)) if rng is not None else None
    colors, cache = _volume_forward(kfield, origins, dirs, n_s, jitter, background, frozen_normals, want_grads)
    resid = colors - target
    loss = float(np.abs(resid).sum() / B)
    if not want_grads:
        return loss, None, {"colors": colors, "jitter": jitter}
    g = np.sign(resid) / B
    grads = _volume_backward(kfield, cache, g)
    return loss, grads, {"colors": colors, "jitter": jitter}


def eikonal_loss(kfield: KiloField, M: int, seed) -> float:
    loss, _ = _eikonal_loss_and_grads(kfield, M, seed, want_grads=False)
    return loss


def _eikonal_loss_and_grads(kfield: KiloField, M: int, seed, want_grads: bool, points: np.ndarray | None = None):
    """Mean (|grad d| - 1)^2 at uniform bbox samples, gradients by central FD.

    Each probe's contribution backprops into the cell that owns the probe,
    so straddling probes penalize cross-face jumps.
    """
    if M <= 0 and points is None:
        raise ValueError("M must be > 0")
    cfg = kfield.config
    x = points if points is not None else sample_bbox_uniform(cfg, M, seed)
    M = len(x)
    hi, lo, denom = _fd_probes(cfg, x)
    probes = np.concatenate([hi.reshape(-1, 3), lo.reshape(-1, 3)], axis=0)
    routing, out, cache = _sdf_forward(kfield, probes, want_grads)
    d = out[:, 0].astype(np.float64)
    d_hi = d[: 3 * M].reshape(M, 3)
    d_lo = d[3 * M :].reshape(M, 3)
    g = (d_hi - d_lo) / denom
    norm = np.linalg.norm(g, axis=1)
    loss = float(np.mean((norm - 1.0) ** 2))
    if not want_grads:
        return loss, None

    safe = np.maximum(norm, 1e-12)
    g_norm = 2.0 * (norm - 1.0) / M
    g_g = g_norm[:, None] * g / safe[:, None]
    g_probe_hi = g_g / denom
    g_probe_lo = -g_probe_hi
    g_d = np.concatenate([g_probe_hi.reshape(-1), g_probe_lo.reshape(-1)])
    g_out = np.zeros((6 * M, 1 + cfg.feature_dim), dtype=kfield.dtype)
    g_out[:, 0] = g_d.astype(kfield.dtype)
    sdf_grads, _ = gridmod.grid_backward(kfield.sdf, routing, cache, routing.sort(g_out), want_input_grad=False)
    empty = np.empty(0, dtype=np.int64)
    return loss, FieldGrads(sdf_grads, [np.zeros_like(p) for p in kfield.color.param_arrays()], 0.0, routing.cells, empty)


# ---------------------------------------------------------------------------
# fine-tuning


def finetune_step(kfield: KiloField, dataset: list[TrainImage], cfg: FinetuneConfig, rng, opts=None, lr: float | None = None):
    """One fine-tune step: photometric + lambda * eikonal, Adam on touched cells.

    Returns the loss components; opts is the (sdf, color, inv_std) optimizer
    triple and is created on the fly when omitted.
    """
    if opts is None:
        opts = (GridAdam(kfield.sdf, cfg.lr), GridAdam(kfield.color, cfg.lr), ScalarAdam(cfg.lr))
    opt_sdf, opt_color, opt_s = opts
    lr = cfg.lr if lr is None else lr

    image = dataset[int(rng.integers(len(dataset)))]
    px = rng.integers(0, image.pose.width, size=cfg.pixel_batch)
    py = rng.integers(0, image.pose.height, size=cfg.pixel_batch)
    pixels = np.stack([px, py], axis=1)
    background = _dataset_background(image)
    loss_color, grads, _ = _photometric_loss_and_grads(
        kfield, image, pixels, cfg.samples_per_ray, rng, background, want_grads=True
    )
    eik_seed = int(rng.integers(2**62))
    loss_eik, eik_grads = _eikonal_loss_and_grads(kfield, cfg.eikonal_samples, eik_seed, want_grads=True)
    total = loss_color + cfg.eikonal_weight * loss_eik
    if not np.isfinite(total):
        raise TrainingDiverged(f"fine-tuning loss non-finite (color {loss_color}, eikonal {loss_eik})")
    grads.add_scaled(eik_grads, cfg.eikonal_weight)

    opt_sdf.step(grads.sdf, grads.sdf_cells, lr)
    opt_color.step(grads.color, grads.color_cells, lr)
    opt_s.step(kfield.inv_std_param, grads.inv_std, lr * cfg.s_lr_scale)
    return {"loss_color": loss_color, "loss_eikonal": loss_eik, "loss": total, "s": kfield.s}


def _dataset_background(image: TrainImage):
    # corner pixel of a synthetic render is background by construction
    return image.pixels[0, 0].astype(np.float64)


def save_dataset(images: list[TrainImage], path):
    """Float-exact dataset container (npz): pixel stacks plus camera arrays."""
    np.savez_compressed(
        path,
        pixels=np.stack([im.pixels for im in images]),
        positions=np.stack([im.pose.position for im in images]),
        rotations=np.stack([im.pose.rotation for im in images]),
        fovs=np.array([im.pose.fov_y for im in images]),
    )


def load_dataset(path) -> list[TrainImage]:
    data = np.load(path)
    out = []
    for pix, pos, rot, fov in zip(data["pixels"], data["positions"], data["rotations"], data["fovs"]):
        pose = CameraPose(pos, rot, float(fov), pix.shape[1], pix.shape[0])
        out.append(TrainImage(pix, pose))
    return out


def finetune_run(kfield: KiloField, dataset: list[TrainImage], cfg: FinetuneConfig, log_every: int = 0):
    """Full fine-tune phase; re-initializes the deviation parameter first."""
    kfield.inv_std_param[...] = np.log(cfg.init_s)
    rng = np.random.default_rng(cfg.seed)
    opts = (GridAdam(kfield.sdf, cfg.lr), GridAdam(kfield.color, cfg.lr), ScalarAdam(cfg.lr))
    history = []
    for step in range(cfg.steps):
        lr = lr_schedule("cosine", cfg.lr, step, max(cfg.steps, 1), alpha=cfg.cosine_alpha)
        losses = finetune_step(kfield, dataset, cfg, rng, opts, lr)
        if not np.isfinite(losses["loss"]):
            raise TrainingDiverged(f"fine-tuning diverged at step {step}")
        history.append({"step": step, "lr": lr, **losses})
        if log_every and step % log_every == 0:
            print(
                f"[finetune] step {step} lr {lr:.2e} color {losses['loss_color']:.4f} "
                f"eik {losses['loss_eikonal']:.4f} s {losses['s']:.1f}"
            )
    return history
