"""Geometry and image evaluation: marching cubes, Chamfer, PSNR, SSIM."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

PSNR_CAP_DB = 99.0

# ITU-R BT.601 luma weights, the common grayscale reduction
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class TriMesh:
    vertices: np.ndarray  # (n, 3) float
    triangles: np.ndarray  # (m, 3) int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and self.triangles.max() >= len(self.vertices):
            raise ValueError("triangle index out of range")

    def surface_area(self) -> float:
        a = self.vertices[self.triangles[:, 0]]
        b = self.vertices[self.triangles[:, 1]]
        c = self.vertices[self.triangles[:, 2]]
        return float(0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1).sum())


@dataclass
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)


def _sample_volume(sdf_source, resolution: int, bbox_min, bbox_max) -> np.ndarray:
    from . import grid as gridmod

    xs = [np.linspace(bbox_min[a], bbox_max[a], resolution) for a in range(3)]
    gx, gy, gz = np.meshgrid(*xs, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    if isinstance(sdf_source, gridmod.KiloField):
        vals = gridmod.sdf_values(sdf_source, pts).astype(np.float64)
    elif callable(sdf_source):
        vals = np.asarray(sdf_source(pts), dtype=np.float64)
    elif hasattr(sdf_source, "sdf"):
        vals = np.asarray(sdf_source.sdf(pts), dtype=np.float64)
    else:
        raise TypeError("sdf_source must be a KiloField, a callable, or expose .sdf()")
    return vals.reshape(resolution, resolution, resolution)


def marching_cubes(sdf_source, resolution: int = 128, bbox_min=(-1.0, -1.0, -1.0), bbox_max=(1.0, 1.0, 1.0)) -> TriMesh:
    """Zero-isosurface triangulation on a resolution^3 sample lattice.

    sdf_source may be a KiloField, any object with .sdf(points), or a plain
    callable points -> values. A field with no sign change yields an empty
    mesh. Degenerate (zero-area) triangles are dropped.
    """
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    bbox_min = np.asarray(bbox_min, dtype=np.float64)
    bbox_max = np.asarray(bbox_max, dtype=np.float64)
    vol = _sample_volume(sdf_source, resolution, bbox_min, bbox_max)
    if vol.min() > 0 or vol.max() < 0:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    spacing = (bbox_max - bbox_min) / (resolution - 1)
    verts, faces, _, _ = measure.marching_cubes(vol, level=0.0, spacing=tuple(spacing), method="lorensen")
    verts = verts + bbox_min
    # drop exact zero-area triangles (collinear or repeated vertices)
    a, b, c = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    area2 = np.linalg.norm(np.cross(b - a, c - a), axis=1)
    faces = faces[area2 > 0]
    return TriMesh(verts, faces)


def chamfer(a: PointCloud, b: PointCloud) -> float:
    """Symmetric Chamfer distance: half the sum of both mean nearest-neighbor distances."""
    if len(a.points) == 0 or len(b.points) == 0:
        raise ValueError("chamfer needs non-empty point clouds")
    d_ab = cKDTree(b.points).query(a.points, k=1)[0]
    d_ba = cKDTree(a.points).query(b.points, k=1)[0]
    return float(0.5 * (d_ab.mean() + d_ba.mean()))


def psnr(a: np.ndarray, b: np.ndarray, cap: float = PSNR_CAP_DB) -> float:
    """10 log10(1/MSE) for images in [0,1]; identical images report the cap."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0:
        return cap
    return min(cap, 10.0 * np.log10(1.0 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _windowed(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Valid-mode correlation of a 2D image with the window."""
    k = window.shape[0]
    view = np.lib.stride_tricks.sliding_window_view(img, (k, k))
    return np.tensordot(view, window, axes=([2, 3], [0, 1]))


def ssim(a: np.ndarray, b: np.ndarray, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity, 11x11 Gaussian window (sigma 1.5), L = 1.

    RGB inputs are reduced to luminance first; images must be at least as
    large as the window.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a = a @ LUMA
        b = b @ LUMA
    win = _gaussian_window()
    if a.shape[0] < win.shape[0] or a.shape[1] < win.shape[1]:
        raise ValueError("image smaller than the SSIM window")
    c1 = k1**2
    c2 = k2**2
    mu_a = _windowed(a, win)
    mu_b = _windowed(b, win)
    var_a = _windowed(a * a, win) - mu_a**2
    var_b = _windowed(b * b, win) - mu_b**2
    cov = _windowed(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# file formats


def save_obj(mesh: TriMesh, path):
    """Plain OBJ with v/f records only (1-based indices)."""
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.8g} {v[1]:.8g} {v[2]:.8g}\n")
        for t in mesh.triangles:
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def load_obj(path) -> TriMesh:
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:4]]
                faces.append(idx)
    return TriMesh(np.asarray(verts, dtype=np.float64).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3))


def save_xyz(cloud: PointCloud, path):
    np.savetxt(path, cloud.points, fmt="%.8g")


def load_xyz(path) -> PointCloud:
    return PointCloud(np.loadtxt(path, dtype=np.float64).reshape(-1, 3))


def mesh_to_cloud(mesh: TriMesh) -> PointCloud:
    return PointCloud(mesh.vertices)


def sample_mesh_surface(mesh: TriMesh, n: int, seed: int = 0) -> PointCloud:
    """Uniform area-weighted surface samples, for Chamfer against dense clouds."""
    a = mesh.vertices[mesh.triangles[:, 0]]
    b = mesh.vertices[mesh.triangles[:, 1]]
    c = mesh.vertices[mesh.triangles[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(areas), size=n, p=areas / areas.sum())
    u = rng.uniform(size=(n, 1))
    v = rng.uniform(size=(n, 1))
    flip = (u + v) > 1
    u[flip] = 1 - u[flip]
    v[flip] = 1 - v[flip]
    pts = a[tri] + u * (b[tri] - a[tri]) + v * (c[tri] - a[tri])
    return PointCloud(pts)
