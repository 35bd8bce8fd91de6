"""The grid-of-MLPs field: routing, grouped batched dispatch, FD gradients.

A bounding box is split into an N^3 lattice of cells; each cell owns one
tiny SDF MLP (fourier-encoded position -> distance + feature vector) and
one tiny color MLP (position, encoded view dir, normal, features -> RGB).
All cells of a family share one architecture, so their parameters live in
stacked (n_cells, out, in) arrays and a batch query becomes: sort points
by cell, run each occupied cell's layers on its contiguous sub-batch,
scatter results back to input order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .nn import IDENTITY, RELU, SIGMOID, SOFTPLUS

NORMAL_EPS = 1e-8

# below this average points-per-occupied-cell the padded batched matmul
# path beats the per-cell BLAS loop (python call overhead dominates)
_PADDED_PATH_CUTOFF = 48.0


class DegenerateGradientError(ValueError):
    """FD gradient too small to normalize into a surface normal."""


@dataclass
class GridConfig:
    resolution: int = 16
    bbox_min: tuple = (-1.0, -1.0, -1.0)
    bbox_max: tuple = (1.0, 1.0, 1.0)
    sdf_freqs: int = 6
    dir_freqs: int = 4
    feature_dim: int = 8
    fd_step: float = 1e-3

    def __post_init__(self):
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float64)
        self.bbox_max = np.asarray(self.bbox_max, dtype=np.float64)
        if self.resolution < 1:
            raise ValueError("resolution must be >= 1")
        if not np.all(self.bbox_min < self.bbox_max):
            raise ValueError("bbox_min must be < bbox_max componentwise")
        if self.fd_step <= 0:
            raise ValueError("fd_step must be > 0")

    @property
    def n_cells(self) -> int:
        return self.resolution**3

    @property
    def cell_size(self) -> np.ndarray:
        return (self.bbox_max - self.bbox_min) / self.resolution

    def sdf_layer_dims(self) -> list[int]:
        return [nn.encoded_dim(3, self.sdf_freqs), 32, 32, 1 + self.feature_dim]

    def color_layer_dims(self) -> list[int]:
        return [3 + nn.encoded_dim(3, self.dir_freqs) + 3 + self.feature_dim, 32, 32, 3]


SDF_ACTIVATIONS = [SOFTPLUS, SOFTPLUS, IDENTITY]
COLOR_ACTIVATIONS = [RELU, RELU, SIGMOID]


@dataclass
class MlpGrid:
    """All cells' parameters for one MLP family, stacked along a leading cell axis."""

    layer_dims: list[int]
    activations: list[str]
    weights: list[np.ndarray]  # each (n_cells, out, in)
    biases: list[np.ndarray]  # each (n_cells, out)

    @property
    def n_cells(self) -> int:
        return self.weights[0].shape[0]

    @property
    def dtype(self):
        return self.weights[0].dtype

    def mlp(self, flat_index: int) -> nn.TinyMlp:
        """View of one cell's net; mutations write through to the grid."""
        return nn.TinyMlp(
            list(self.layer_dims),
            [w[flat_index] for w in self.weights],
            [b[flat_index] for b in self.biases],
            list(self.activations),
        )

    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def param_arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def zero_grads(self) -> list[np.ndarray]:
        return [np.zeros_like(p) for p in self.param_arrays()]

    @staticmethod
    def init(n_cells: int, layer_dims: list[int], activations: list[str], rng, dtype=np.float32) -> "MlpGrid":
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            bound = np.sqrt(6.0 / fan_in)
            weights.append(rng.uniform(-bound, bound, size=(n_cells, fan_out, fan_in)).astype(dtype))
            biases.append(np.zeros((n_cells, fan_out), dtype=dtype))
        return MlpGrid(list(layer_dims), list(activations), weights, biases)


@dataclass
class KiloField:
    """Grid config + stacked SDF and color MLP grids + the deviation parameter.

    inv_std_param stores log(s); s scales the logistic density that turns
    SDF values into opacity for volumetric training.
    """

    config: GridConfig
    sdf: MlpGrid
    color: MlpGrid
    inv_std_param: np.ndarray  # 0-d array, log s

    @property
    def s(self) -> float:
        return float(np.exp(self.inv_std_param))

    @property
    def dtype(self):
        return self.sdf.dtype

    def param_count(self) -> int:
        return self.sdf.param_count() + self.color.param_count() + 1

    def sdf_mlp(self, i: int, j: int, k: int) -> nn.TinyMlp:
        return self.sdf.mlp(flat_cell(self.config, i, j, k))

    def color_mlp(self, i: int, j: int, k: int) -> nn.TinyMlp:
        return self.color.mlp(flat_cell(self.config, i, j, k))


def field_init(cfg: GridConfig, seed: int, dtype=np.float32, init_s: float = 20.0) -> KiloField:
    rng = np.random.default_rng(seed)
    sdf = MlpGrid.init(cfg.n_cells, cfg.sdf_layer_dims(), SDF_ACTIVATIONS, rng, dtype)
    color = MlpGrid.init(cfg.n_cells, cfg.color_layer_dims(), COLOR_ACTIVATIONS, rng, dtype)
    return KiloField(cfg, sdf, color, np.array(np.log(init_s), dtype=dtype))


# ---------------------------------------------------------------------------
# routing


def flat_cell(cfg: GridConfig, i: int, j: int, k: int) -> int:
    n = cfg.resolution
    return (i * n + j) * n + k


def cell_index(cfg: GridConfig, x) -> tuple[int, int, int]:
    """Cell triple owning point x; outside points clamp to the boundary cell.

    Floor convention: a point exactly on an interior face belongs to the
    higher-index cell; the upper bbox boundary clamps to N-1.
    """
    ijk = _cell_triples(cfg, np.asarray(x, dtype=np.float64)[None, :])[0]
    return int(ijk[0]), int(ijk[1]), int(ijk[2])


def _cell_triples(cfg: GridConfig, pts: np.ndarray) -> np.ndarray:
    n = cfg.resolution
    t = (pts - cfg.bbox_min) / (cfg.bbox_max - cfg.bbox_min) * n
    return np.clip(np.floor(t).astype(np.int64), 0, n - 1)


def cell_index_flat(cfg: GridConfig, pts: np.ndarray) -> np.ndarray:
    ijk = _cell_triples(cfg, pts)
    n = cfg.resolution
    return (ijk[:, 0] * n + ijk[:, 1]) * n + ijk[:, 2]


@dataclass
class Routing:
    """Sorted-by-cell view of a point batch plus the occupied-cell blocks."""

    n: int
    order: np.ndarray  # original index of each sorted row
    cells: np.ndarray  # occupied flat cell ids, ascending
    starts: np.ndarray
    ends: np.ndarray

    def sort(self, arr: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(arr[self.order])

    def unsort(self, arr_sorted: np.ndarray) -> np.ndarray:
        out = np.empty_like(arr_sorted)
        out[self.order] = arr_sorted
        return out


def route(cfg: GridConfig, pts: np.ndarray) -> Routing:
    ids = cell_index_flat(cfg, pts)
    order = np.argsort(ids, kind="stable")
    sorted_ids = ids[order]
    cells, starts = np.unique(sorted_ids, return_index=True)
    ends = np.append(starts[1:], len(pts))
    return Routing(len(pts), order, cells, starts, ends)


# ---------------------------------------------------------------------------
# grouped forward / backward


def _act_grad(name: str, pre, post):
    if name == IDENTITY:
        return None  # multiply by one
    if name == RELU:
        return (post > 0).astype(post.dtype)
    if name == SOFTPLUS:
        return nn.sigmoid(pre)
    if name == SIGMOID:
        return post * (1.0 - post)
    raise ValueError(name)


def _size_classes(routing: Routing):
    counts = routing.ends - routing.starts
    cls = np.maximum(0, np.ceil(np.log2(counts)).astype(np.int64))
    groups = {}
    for c in np.unique(cls):
        groups[1 << int(c)] = np.nonzero(cls == c)[0]
    return groups


def grid_forward(grid: MlpGrid, x_sorted: np.ndarray, routing: Routing, want_cache: bool = False):
    """Evaluate each occupied cell's MLP on its contiguous sub-batch.

    x_sorted rows must already be in routing order. Returns the sorted-order
    outputs, plus per-layer activations when want_cache (needed by backward).
    """
    n = routing.n
    n_layers = len(grid.weights)
    avg = n / max(len(routing.cells), 1)
    posts = [x_sorted]
    pres: dict[int, np.ndarray] = {}

    if avg >= _PADDED_PATH_CUTOFF:
        h = x_sorted
        for k in range(n_layers):
            W, b, act = grid.weights[k], grid.biases[k], grid.activations[k]
            z = np.empty((n, W.shape[1]), dtype=grid.dtype)
            for bi in range(len(routing.cells)):
                ci = routing.cells[bi]
                s0, e0 = routing.starts[bi], routing.ends[bi]
                z[s0:e0] = h[s0:e0] @ W[ci].T + b[ci]
            h = nn.apply_activation(act, z)
            if want_cache and act == SOFTPLUS:
                pres[k] = z
            posts.append(h)
    else:
        groups = _size_classes(routing)
        keep = set(range(n_layers)) if want_cache else {n_layers - 1}
        out_layers = {k: np.empty((n, grid.weights[k].shape[1]), dtype=grid.dtype) for k in keep}
        pre_layers = {k: np.empty((n, grid.weights[k].shape[1]), dtype=grid.dtype) for k in range(n_layers) if want_cache and grid.activations[k] == SOFTPLUS}
        for pad, members in groups.items():
            starts = routing.starts[members]
            ends = routing.ends[members]
            base = starts[:, None] + np.arange(pad)[None, :]
            valid = base < ends[:, None]
            safe = np.where(valid, base, starts[:, None])
            cells = routing.cells[members]
            rows = safe[valid]
            h = x_sorted[safe]
            for k in range(n_layers):
                W, b, act = grid.weights[k], grid.biases[k], grid.activations[k]
                z = np.matmul(h, W[cells].transpose(0, 2, 1))
                z += b[cells][:, None, :]
                h = nn.apply_activation(act, z)
                if k in pre_layers:
                    pre_layers[k][rows] = z[valid]
                if k in keep:
                    out_layers[k][rows] = h[valid]
        posts.extend(out_layers[k] for k in sorted(out_layers))
        pres = pre_layers

    if want_cache:
        return posts[-1], {"posts": posts, "pres": pres}
    return posts[-1], None


def grid_backward(grid: MlpGrid, routing: Routing, cache: dict, grad_out_sorted: np.ndarray, want_input_grad: bool = True):
    """Reverse pass matching grid_forward; returns stacked per-cell param grads.

    Gradients land only in the cells routing touched; untouched cells stay
    exactly zero, which keeps training local to sampled cells.
    """
    posts, pres = cache["posts"], cache["pres"]
    n_layers = len(grid.weights)
    w_grads = [np.zeros_like(w) for w in grid.weights]
    b_grads = [np.zeros_like(b) for b in grid.biases]
    n = routing.n
    avg = n / max(len(routing.cells), 1)
    g = grad_out_sorted

    if avg >= _PADDED_PATH_CUTOFF:
        for k in range(n_layers - 1, -1, -1):
            act = grid.activations[k]
            ag = _act_grad(act, pres.get(k), posts[k + 1])
            gz = g if ag is None else g * ag
            prev = posts[k]
            g_prev = np.empty((n, grid.weights[k].shape[2]), dtype=g.dtype) if (k > 0 or want_input_grad) else None
            W = grid.weights[k]
            for bi in range(len(routing.cells)):
                ci = routing.cells[bi]
                s0, e0 = routing.starts[bi], routing.ends[bi]
                gzb = gz[s0:e0]
                w_grads[k][ci] = gzb.T @ prev[s0:e0]
                b_grads[k][ci] = gzb.sum(axis=0)
                if g_prev is not None:
                    g_prev[s0:e0] = gzb @ W[ci]
            g = g_prev
    else:
        groups = _size_classes(routing)
        padded = {}
        for pad, members in groups.items():
            starts = routing.starts[members]
            ends = routing.ends[members]
            base = starts[:, None] + np.arange(pad)[None, :]
            valid = base < ends[:, None]
            safe = np.where(valid, base, starts[:, None])
            padded[pad] = (members, valid, safe, routing.cells[members])
        for k in range(n_layers - 1, -1, -1):
            act = grid.activations[k]
            ag = _act_grad(act, pres.get(k), posts[k + 1])
            gz = g if ag is None else g * ag
            prev = posts[k]
            g_prev = np.empty((n, grid.weights[k].shape[2]), dtype=g.dtype) if (k > 0 or want_input_grad) else None
            for pad, (members, valid, safe, cells) in padded.items():
                gz_pad = gz[safe]
                gz_pad[~valid] = 0.0
                prev_pad = prev[safe]
                w_grads[k][cells] += np.matmul(gz_pad.transpose(0, 2, 1), prev_pad)
                b_grads[k][cells] += gz_pad.sum(axis=1)
                if g_prev is not None:
                    gp = np.matmul(gz_pad, grid.weights[k][cells])
                    g_prev[safe[valid]] = gp[valid]
            g = g_prev

    grads = []
    for wg, bg in zip(w_grads, b_grads):
        grads.extend((wg, bg))
    return grads, g


# ---------------------------------------------------------------------------
# field queries


@dataclass
class SdfSample:
    """Batched SDF query result: distances (n,) and feature vectors (n, F)."""

    value: np.ndarray
    features: np.ndarray


def sdf_query(field: KiloField, points: np.ndarray) -> SdfSample:
    """Signed distance and features at each point, via grouped dispatch."""
    pts = np.ascontiguousarray(np.atleast_2d(points), dtype=field.dtype)
    routing = route(field.config, pts)
    enc = nn.fourier_encode(routing.sort(pts), field.config.sdf_freqs)
    out_sorted, _ = grid_forward(field.sdf, enc, routing)
    out = routing.unsort(out_sorted)
    return SdfSample(value=out[:, 0], features=out[:, 1:])


def sdf_values(field: KiloField, points: np.ndarray) -> np.ndarray:
    return sdf_query(field, points).value


def color_query(field: KiloField, x: np.ndarray, v: np.ndarray, n: np.ndarray, z: np.ndarray) -> np.ndarray:
    """RGB in (0,1) from the cell-selected color MLP.

    Input layout: raw position, view direction encoded at dir_freqs,
    raw normal, feature vector.
    """
    x = np.atleast_2d(np.asarray(x, dtype=field.dtype))
    v = np.atleast_2d(np.asarray(v, dtype=field.dtype))
    n = np.atleast_2d(np.asarray(n, dtype=field.dtype))
    z = np.atleast_2d(np.asarray(z, dtype=field.dtype))
    inp = np.concatenate([x, nn.fourier_encode(v, field.config.dir_freqs), n, z], axis=1)
    routing = route(field.config, x)
    out_sorted, _ = grid_forward(field.color, routing.sort(inp), routing)
    return routing.unsort(out_sorted)


def grouped_query(field: KiloField, points: np.ndarray, kind: str, **aux):
    """Spec-level dispatcher: kind 'sdf' needs only points, 'color' needs v, n, z."""
    if kind == "sdf":
        return sdf_query(field, points)
    if kind == "color":
        return color_query(field, points, aux["v"], aux["n"], aux["z"])
    raise ValueError(f"unknown query kind {kind!r}")


# ---------------------------------------------------------------------------
# finite-difference gradients


def _fd_probes(cfg: GridConfig, pts: np.ndarray):
    """Per-axis probe pairs, clamped into the bbox for interior points.

    At the boundary this degrades to a one-sided difference instead of
    collapsing both probes onto the same point. Points outside the bbox
    keep unclamped probes (the field is defined everywhere via routed
    encoding, and clamping both sides would zero the gradient).
    """
    h = cfg.fd_step
    n = len(pts)
    hi = np.repeat(pts[:, None, :], 3, axis=1)  # (n, 3 axes, 3)
    lo = hi.copy()
    for a in range(3):
        inside = (pts[:, a] >= cfg.bbox_min[a]) & (pts[:, a] <= cfg.bbox_max[a])
        up = pts[:, a] + h
        dn = pts[:, a] - h
        hi[:, a, a] = np.where(inside, np.minimum(up, cfg.bbox_max[a]), up)
        lo[:, a, a] = np.where(inside, np.maximum(dn, cfg.bbox_min[a]), dn)
    denom = hi[np.arange(n)[:, None], np.arange(3)[None, :], np.arange(3)[None, :]] - lo[
        np.arange(n)[:, None], np.arange(3)[None, :], np.arange(3)[None, :]
    ]
    return hi, lo, denom


def grad_fd(field: KiloField, x: np.ndarray) -> np.ndarray:
    """Central-difference gradient of the global SDF, step = config.fd_step."""
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    single = np.asarray(x).ndim == 1
    hi, lo, denom = _fd_probes(field.config, pts)
    probes = np.concatenate([hi.reshape(-1, 3), lo.reshape(-1, 3)], axis=0)
    d = sdf_values(field, probes).astype(np.float64)
    m = len(pts)
    d_hi = d[: 3 * m].reshape(m, 3)
    d_lo = d[3 * m :].reshape(m, 3)
    g = (d_hi - d_lo) / denom
    return g[0] if single else g


def normal_batch(field: KiloField, x: np.ndarray, eps: float = NORMAL_EPS):
    """Normalized FD gradients plus a validity mask (False where degenerate)."""
    g = np.atleast_2d(grad_fd(field, x))
    norm = np.linalg.norm(g, axis=1)
    ok = norm > eps
    out = np.zeros_like(g)
    out[ok] = g[ok] / norm[ok, None]
    return out, ok


def normal(field: KiloField, x: np.ndarray) -> np.ndarray:
    """Unit surface normal at x; raises DegenerateGradientError on a flat spot."""
    nrm, ok = normal_batch(field, np.asarray(x, dtype=np.float64)[None, :])
    if not ok[0]:
        raise DegenerateGradientError(f"gradient norm <= {NORMAL_EPS} at {x}")
    return nrm[0]


# ---------------------------------------------------------------------------
# seam diagnostics


def seam_jump_stats(field: KiloField, n_pairs: int = 4096, delta: float = 1e-4, seed: int = 0) -> dict:
    """SDF jump across interior cell faces, probed at +-delta/2 off the face.

    Piecewise-independent MLPs make the global field discontinuous at faces;
    fine-tuning with straddling FD probes is supposed to shrink these jumps,
    so the 99th percentile is the headline number.
    """
    cfg = field.config
    if cfg.resolution < 2:
        raise ValueError("seam metric needs at least 2 cells per axis")
    rng = np.random.default_rng(seed)
    axis = rng.integers(0, 3, n_pairs)
    plane = rng.integers(1, cfg.resolution, n_pairs)
    pts = rng.uniform(cfg.bbox_min, cfg.bbox_max, size=(n_pairs, 3))
    face_coord = cfg.bbox_min[axis] + plane * cfg.cell_size[axis]
    plus = pts.copy()
    minus = pts.copy()
    plus[np.arange(n_pairs), axis] = face_coord + delta / 2
    minus[np.arange(n_pairs), axis] = face_coord - delta / 2
    jump = np.abs(
        sdf_values(field, plus).astype(np.float64) - sdf_values(field, minus).astype(np.float64)
    )
    return {
        "p50": float(np.percentile(jump, 50)),
        "p99": float(np.percentile(jump, 99)),
        "max": float(jump.max()),
        "mean": float(jump.mean()),
    }
