"""Command-line entry points for the whole pipeline."""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time

import numpy as np

from . import __version__, grid as gridmod, mesh as meshmod, nn
from .cameras import look_at_pose, poses_on_sphere
from .config import ConfigError, load_run_config, load_scene
from .grid import GridConfig, field_init
from .images import read_image_float, to_uint8, write_depth_raster, write_image
from .modelio import ModelIOError, load_model, save_model
from .pathtrace import render_pathtraced
from .surface import FieldSurface, RenderSettings, pass_image, render_frame, thread_count
from .training import (
    DistillConfig,
    FinetuneConfig,
    TrainingDiverged,
    distill_run,
    finetune_run,
    load_dataset,
    make_dataset,
    save_dataset,
)

# measured on an RTX 3090 at 1280x720; a reference point, not a target for this CPU build
GPU_REFERENCE_FPS = 46


def _write_csv(path, rows, fieldnames):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


def _parse_vec3(text):
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected x,y,z")
    return tuple(parts)


def _parse_size(text):
    w, _, h = text.lower().partition("x")
    return int(w), int(h)


def _out_dir(cfg_dir):
    d = os.environ.get("KNF_OUT", cfg_dir)
    os.makedirs(d, exist_ok=True)
    return d


def cmd_make_dataset(args):
    cfg = load_run_config(args.config)
    ds = cfg.dataset
    images = make_dataset(
        cfg.teacher, ds.views, ds.resolution, ds.seed,
        fov_y=ds.fov_y, radius=ds.radius, background=ds.background,
        bbox_min=cfg.grid.bbox_min, bbox_max=cfg.grid.bbox_max, supersample=ds.supersample,
    )
    out = _out_dir(cfg.out_dir)
    path = os.path.join(out, "dataset.npz")
    save_dataset(images, path)
    if args.png:
        for i, im in enumerate(images):
            write_image(os.path.join(out, f"view_{i:03d}.png"), im.pixels)
    print(f"wrote {len(images)} views to {path}")
    return 0


def cmd_distill(args):
    cfg = load_run_config(args.config)
    kfield = field_init(cfg.grid, cfg.seed)
    dcfg = cfg.distill
    t0 = time.perf_counter()
    history = distill_run(kfield, cfg.teacher, dcfg, log_every=args.log_every)
    dt = time.perf_counter() - t0
    out = _out_dir(cfg.out_dir)
    model_path = args.model or os.path.join(out, "distilled.knf")
    save_model(kfield, model_path)
    _write_csv(os.path.join(out, "distill_loss.csv"), history, ["step", "lr", "loss_sdf", "loss_color", "loss"])
    print(f"distilled {dcfg.steps} steps in {dt:.1f}s -> {model_path}")
    return 0


def cmd_finetune(args):
    cfg = load_run_config(args.config)
    kfield = load_model(args.model)
    if args.dataset:
        images = load_dataset(args.dataset)
    else:
        ds = cfg.dataset
        images = make_dataset(
            cfg.teacher, ds.views, ds.resolution, ds.seed,
            fov_y=ds.fov_y, radius=ds.radius, background=ds.background,
            bbox_min=cfg.grid.bbox_min, bbox_max=cfg.grid.bbox_max, supersample=ds.supersample,
        )
    t0 = time.perf_counter()
    history = finetune_run(kfield, images, cfg.finetune, log_every=args.log_every)
    dt = time.perf_counter() - t0
    out = _out_dir(cfg.out_dir)
    model_path = args.out_model or os.path.join(out, "finetuned.knf")
    save_model(kfield, model_path)
    _write_csv(os.path.join(out, "finetune_loss.csv"), history, ["step", "lr", "loss_color", "loss_eikonal", "s"])
    print(f"fine-tuned {cfg.finetune.steps} steps in {dt:.1f}s -> {model_path}")
    return 0


def cmd_render(args):
    kfield = load_model(args.model)
    surface = FieldSurface(kfield)
    w, h = args.size
    pose = look_at_pose(args.position, args.look_at, args.up, np.deg2rad(args.fov_deg), w, h)
    settings = RenderSettings(render_pass=args.render_pass)
    t0 = time.perf_counter()
    buffers = render_frame(surface, pose, settings, background=args.background, supersample=args.supersample)
    dt = time.perf_counter() - t0
    write_image(args.out, pass_image(buffers, args.render_pass, args.background))
    if args.depth_out:
        write_depth_raster(args.depth_out, buffers.depth)
    print(f"rendered {w}x{h} {args.render_pass} pass in {dt * 1000:.0f} ms -> {args.out}")
    return 0


def cmd_pathtrace(args):
    scene = load_scene(args.scene)
    w, h = args.size
    pose = look_at_pose(args.position, args.look_at, args.up, np.deg2rad(args.fov_deg), w, h)
    t0 = time.perf_counter()
    result = render_pathtraced(scene, pose, args.spp, args.seed)
    dt = time.perf_counter() - t0
    write_image(args.out, result.ldr)
    print(f"path traced {w}x{h} at {args.spp} spp in {dt:.1f}s -> {args.out}")
    return 0


def cmd_extract_mesh(args):
    kfield = load_model(args.model)
    cfg = kfield.config
    mesh = meshmod.marching_cubes(kfield, args.resolution, cfg.bbox_min, cfg.bbox_max)
    meshmod.save_obj(mesh, args.out)
    print(f"extracted {len(mesh.vertices)} vertices / {len(mesh.triangles)} triangles -> {args.out}")
    return 0


def _load_cloud(path):
    if path.endswith(".obj"):
        return meshmod.mesh_to_cloud(meshmod.load_obj(path))
    return meshmod.load_xyz(path)


def cmd_eval(args):
    if args.metric == "chamfer":
        value = meshmod.chamfer(_load_cloud(args.a), _load_cloud(args.b))
    else:
        a = read_image_float(args.a)
        b = read_image_float(args.b)
        value = meshmod.psnr(a, b) if args.metric == "psnr" else meshmod.ssim(a, b)
    print(f"{value:.6g}")
    return 0


def cmd_bench(args):
    if args.model:
        kfield = load_model(args.model)
    else:
        kfield = field_init(GridConfig(resolution=args.grid), seed=0)
    cfg = kfield.config
    rng = np.random.default_rng(0)
    pts = rng.uniform(cfg.bbox_min, cfg.bbox_max, size=(args.points, 3)).astype(np.float32)

    t0 = time.perf_counter()
    gridmod.sdf_query(kfield, pts)
    grouped_s = time.perf_counter() - t0
    grouped_qps = args.points / grouped_s

    n_naive = min(args.naive_points, args.points)
    sub = pts[:n_naive]
    t0 = time.perf_counter()
    for k in range(n_naive):
        ci = gridmod.cell_index(cfg, sub[k])
        nn.mlp_forward(kfield.sdf_mlp(*ci), nn.fourier_encode(sub[k], cfg.sdf_freqs))
    naive_s = time.perf_counter() - t0
    naive_qps = n_naive / naive_s

    surface = FieldSurface(kfield)
    w, h = args.size
    pose = look_at_pose((0, 0, 2.5), (0, 0, 0), (0, 1, 0), np.deg2rad(40), w, h)
    t0 = time.perf_counter()
    render_frame(surface, pose, RenderSettings())
    frame_s = time.perf_counter() - t0

    cores = os.cpu_count()
    print(f"grid {cfg.resolution}^3, {thread_count()} threads on {cores} cores")
    print(f"grouped dispatch : {grouped_qps / 1e6:.2f} M queries/s ({args.points} pts in {grouped_s:.2f}s)")
    print(f"naive per-point  : {naive_qps / 1e3:.1f} k queries/s ({n_naive} pts in {naive_s:.2f}s)")
    print(f"grouped / naive  : {grouped_qps / naive_qps:.1f}x")
    print(f"sphere-traced color pass {w}x{h}: {frame_s * 1000:.0f} ms -> {1 / frame_s:.2f} FPS, {w * h / frame_s / 1e3:.0f} k rays/s")
    print(f"(GPU-class reference renderers reach ~{GPU_REFERENCE_FPS} FPS at 1280x720; not a target for this CPU build)")
    return 0


def cmd_serve(args):
    from .service import serve

    kfield = load_model(args.model)
    return serve(kfield, args.bind, args.max_resolution)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kilofield", description="Grid-of-MLPs neural SDF toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", metavar="command")

    def add_camera_args(sp):
        sp.add_argument("--position", type=_parse_vec3, default=(0.0, 0.0, 2.5))
        sp.add_argument("--look-at", type=_parse_vec3, default=(0.0, 0.0, 0.0))
        sp.add_argument("--up", type=_parse_vec3, default=(0.0, 1.0, 0.0))
        sp.add_argument("--fov-deg", type=float, default=40.0)
        sp.add_argument("--size", type=_parse_size, default=(256, 256), help="WxH")

    sp = sub.add_parser("make-dataset", help="render synthetic training views of the teacher")
    sp.add_argument("--config", required=True)
    sp.add_argument("--png", action="store_true", help="also write per-view PNG previews")
    sp.set_defaults(func=cmd_make_dataset)

    sp = sub.add_parser("distill", help="train a fresh grid against the analytic teacher")
    sp.add_argument("--config", required=True)
    sp.add_argument("--model", help="output model path (default <out>/distilled.knf)")
    sp.add_argument("--log-every", type=int, default=0)
    sp.set_defaults(func=cmd_distill)

    sp = sub.add_parser("finetune", help="photometric + eikonal fine-tuning of a distilled model")
    sp.add_argument("--config", required=True)
    sp.add_argument("--model", required=True, help="input (distilled) model")
    sp.add_argument("--dataset", help="dataset.npz from make-dataset (default: regenerate)")
    sp.add_argument("--out-model", help="output model path (default <out>/finetuned.knf)")
    sp.add_argument("--log-every", type=int, default=0)
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("render", help="sphere-traced color/normal/depth pass")
    sp.add_argument("--model", required=True)
    sp.add_argument("--pass", dest="render_pass", choices=["color", "normal", "depth"], default="color")
    sp.add_argument("--out", required=True, help=".png or .ppm")
    sp.add_argument("--depth-out", help="optional raw float32 depth raster")
    sp.add_argument("--background", type=_parse_vec3, default=(1.0, 1.0, 1.0))
    sp.add_argument("--supersample", type=int, default=1)
    add_camera_args(sp)
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("pathtrace", help="path trace a scene file")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--spp", type=int, default=30)
    sp.add_argument("--seed", type=int, default=0)
    add_camera_args(sp)
    sp.set_defaults(func=cmd_pathtrace)

    sp = sub.add_parser("extract-mesh", help="marching cubes to OBJ")
    sp.add_argument("--model", required=True)
    sp.add_argument("--resolution", type=int, default=128)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_extract_mesh)

    sp = sub.add_parser("eval", help="chamfer/psnr/ssim between artifacts")
    sp.add_argument("metric", choices=["chamfer", "psnr", "ssim"])
    sp.add_argument("a")
    sp.add_argument("b")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="queries/sec and frame rate report")
    sp.add_argument("--model", help="benchmark a trained model instead of a random field")
    sp.add_argument("--grid", type=int, default=16, help="grid resolution for the random field")
    sp.add_argument("--points", type=int, default=1_000_000)
    sp.add_argument("--naive-points", type=int, default=1_000_000)
    sp.add_argument("--size", type=_parse_size, default=(256, 256))
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("serve", help="WebSocket render service")
    sp.add_argument("--model", required=True)
    sp.add_argument("--bind", default="127.0.0.1:8765")
    sp.add_argument("--max-resolution", type=int, default=512)
    sp.set_defaults(func=cmd_serve)

    return p


def cli_main(argv=None) -> int:
    parser = build_parser()
    if argv is None:
        argv = sys.argv[1:]
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if not hasattr(args, "func"):
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ConfigError, ModelIOError, TrainingDiverged, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(cli_main())
