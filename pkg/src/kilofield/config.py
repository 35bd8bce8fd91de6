"""Run and scene configuration: TOML in, validated dataclasses out.

Environment overrides: KNF_OUT replaces the output directory, KNF_THREADS
the render thread count. Everything else comes from the file.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import teacher as teachermod
from .grid import GridConfig
from .pathtrace import (
    BoxObj,
    ConstantEnv,
    Emissive,
    Lambertian,
    LatLongEnvMap,
    NeuralObject,
    QuadObj,
    Scene,
    SphereObj,
)
from .surface import FieldSurface
from .training import DistillConfig, FinetuneConfig


class ConfigError(ValueError):
    """Malformed or inconsistent configuration file."""


@dataclass
class DatasetConfig:
    views: int = 32
    holdout_views: int = 8
    resolution: int = 128
    fov_deg: float = 40.0
    radius: float = 2.5
    background: tuple = (1.0, 1.0, 1.0)
    supersample: int = 2
    seed: int = 0

    @property
    def fov_y(self) -> float:
        return float(np.deg2rad(self.fov_deg))


@dataclass
class RunConfig:
    seed: int
    teacher: teachermod.AnalyticTeacher
    grid: GridConfig
    distill: DistillConfig
    finetune: FinetuneConfig
    dataset: DatasetConfig
    out_dir: str


def _take(d: dict, cls, section: str, **renames):
    kwargs = {}
    fields = cls.__dataclass_fields__
    for k, v in d.items():
        key = renames.get(k, k)
        if key not in fields:
            raise ConfigError(f"[{section}] unknown key {k!r}")
        kwargs[key] = tuple(v) if isinstance(v, list) else v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{section}] {e}") from None


_SHAPES = {"sphere", "box", "torus", "union", "smooth_union"}


def build_shape(d: dict, section: str = "teacher"):
    kind = d.get("shape", "sphere")
    if kind not in _SHAPES:
        raise ConfigError(f"[{section}] unknown shape {kind!r}")
    if kind == "sphere":
        return teachermod.Sphere(tuple(d.get("center", (0, 0, 0))), d.get("radius", 0.5))
    if kind == "box":
        return teachermod.Box(tuple(d.get("center", (0, 0, 0))), tuple(d.get("half_extents", (0.3, 0.3, 0.3))))
    if kind == "torus":
        return teachermod.Torus(tuple(d.get("center", (0, 0, 0))), d.get("ring_radius", 0.5), d.get("tube_radius", 0.2))
    if "a" not in d or "b" not in d:
        raise ConfigError(f"[{section}] union needs [teacher.a] and [teacher.b] shapes")
    a = build_shape(d["a"], section + ".a")
    b = build_shape(d["b"], section + ".b")
    if kind == "union":
        return teachermod.Union(a, b)
    return teachermod.SmoothUnion(a, b, d.get("blend", 0.1))


def build_color_model(d: dict, section: str = "teacher.color"):
    kind = d.get("model", "flat")
    if kind == "flat":
        return teachermod.FlatAlbedo(tuple(d.get("rgb", (0.8, 0.2, 0.2))))
    if kind == "stripes":
        return teachermod.PositionStripes(
            d.get("axis", 0),
            d.get("period", 0.4),
            tuple(d.get("rgb_a", (0.9, 0.6, 0.2))),
            tuple(d.get("rgb_b", (0.2, 0.3, 0.8))),
        )
    if kind == "view_tint":
        return teachermod.ViewTint(tuple(d.get("base_rgb", (0.5, 0.5, 0.5))), d.get("tint_strength", 0.3))
    raise ConfigError(f"[{section}] unknown color model {kind!r}")


def build_teacher(d: dict) -> teachermod.AnalyticTeacher:
    shape = build_shape(d)
    color = build_color_model(d.get("color", {}))
    return teachermod.AnalyticTeacher(shape, color)


def load_run_config(path) -> RunConfig:
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
    seed = int(raw.get("seed", 0))
    teach = build_teacher(raw.get("teacher", {}))
    grid_cfg = _take(raw.get("grid", {}), GridConfig, "grid")
    distill = _take(raw.get("distill", {}), DistillConfig, "distill")
    finetune = _take(raw.get("finetune", {}), FinetuneConfig, "finetune")
    dataset = _take(raw.get("dataset", {}), DatasetConfig, "dataset")
    out_dir = os.environ.get("KNF_OUT") or raw.get("output", {}).get("dir", "out")
    return RunConfig(seed, teach, grid_cfg, distill, finetune, dataset, out_dir)


# ---------------------------------------------------------------------------
# scene files


def _material(d: dict, section: str):
    kind = d.get("material", "lambertian")
    if kind == "lambertian":
        return Lambertian(tuple(d.get("albedo", (0.5, 0.5, 0.5))))
    if kind == "emissive":
        return Emissive(tuple(d.get("radiance", (1.0, 1.0, 1.0))))
    raise ConfigError(f"[{section}] unknown material {kind!r}")


def load_scene(path, model_loader=None) -> Scene:
    """Scene file: an [environment] block plus [[objects]] entries.

    Neural entries reference model files by path; model_loader defaults
    to the binary model reader.
    """
    if model_loader is None:
        from .modelio import load_model

        model_loader = load_model
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None

    env_d = raw.get("environment", {"kind": "constant"})
    if env_d.get("kind", "constant") == "constant":
        env = ConstantEnv(tuple(env_d.get("rgb", (1.0, 1.0, 1.0))))
    elif env_d["kind"] == "latlong":
        from .images import read_image_float

        env = LatLongEnvMap(read_image_float(env_d["image"]))
    else:
        raise ConfigError(f"[environment] unknown kind {env_d['kind']!r}")

    objects = []
    base = os.path.dirname(os.path.abspath(path))
    for i, od in enumerate(raw.get("objects", [])):
        sec = f"objects[{i}]"
        kind = od.get("kind")
        if kind == "sphere":
            objects.append(SphereObj(tuple(od.get("center", (0, 0, 0))), od.get("radius", 0.5), _material(od, sec)))
        elif kind == "quad":
            objects.append(
                QuadObj(tuple(od["corner"]), tuple(od["edge_u"]), tuple(od["edge_v"]), _material(od, sec))
            )
        elif kind == "box":
            objects.append(BoxObj(tuple(od["bmin"]), tuple(od["bmax"]), _material(od, sec)))
        elif kind == "neural":
            model_path = od["model"]
            if not os.path.isabs(model_path):
                model_path = os.path.join(base, model_path)
            fld = model_loader(model_path)
            rot = _rotation_ypr(od.get("yaw_deg", 0.0), od.get("pitch_deg", 0.0), od.get("roll_deg", 0.0))
            objects.append(
                NeuralObject(
                    FieldSurface(fld),
                    tuple(od.get("translation", (0.0, 0.0, 0.0))),
                    rot,
                    od.get("scale", 1.0),
                )
            )
        else:
            raise ConfigError(f"[{sec}] unknown object kind {kind!r}")
    return Scene(objects, env)


def _rotation_ypr(yaw_deg: float, pitch_deg: float, roll_deg: float) -> np.ndarray:
    y, p, r = np.deg2rad([yaw_deg, pitch_deg, roll_deg])
    cy, sy = np.cos(y), np.sin(y)
    cp, sp = np.cos(p), np.sin(p)
    cr, sr = np.cos(r), np.sin(r)
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    return ry @ rx @ rz
