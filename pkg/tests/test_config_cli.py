import os

import numpy as np
import pytest

from kilofield import images
from kilofield.cli import cli_main
from kilofield.config import ConfigError, build_teacher, load_run_config, load_scene
from kilofield.grid import GridConfig, field_init
from kilofield.modelio import save_model
from kilofield.teacher import Box, PositionStripes, SmoothUnion, Sphere

RUN_TOML = """
seed = 3

[teacher]
shape = "sphere"
center = [0.0, 0.0, 0.0]
radius = 0.5

[teacher.color]
model = "stripes"
axis = 0
period = 0.4

[grid]
resolution = 2

[distill]
steps = 3
batch = 64

[finetune]
steps = 1
pixel_batch = 8
eikonal_samples = 16
samples_per_ray = 8

[dataset]
views = 2
resolution = 16
supersample = 1

[output]
dir = "{out}"
"""


@pytest.fixture
def run_config_path(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text(RUN_TOML.replace("{out}", str(tmp_path / "out")))
    return p


class TestRunConfig:
    def test_load(self, run_config_path):
        cfg = load_run_config(run_config_path)
        assert cfg.seed == 3
        assert cfg.grid.resolution == 2
        assert cfg.distill.steps == 3
        assert isinstance(cfg.teacher.shape, Sphere)
        assert isinstance(cfg.teacher.color_model, PositionStripes)

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "bad.toml"
        p.write_text("[grid]\nwat = 3\n")
        with pytest.raises(ConfigError, match="unknown key"):
            load_run_config(p)

    def test_bad_toml_rejected(self, tmp_path):
        p = tmp_path / "broken.toml"
        p.write_text("this is { not toml")
        with pytest.raises(ConfigError):
            load_run_config(p)

    def test_union_teacher(self):
        t = build_teacher(
            {
                "shape": "smooth_union",
                "blend": 0.2,
                "a": {"shape": "sphere", "radius": 0.3},
                "b": {"shape": "box", "half_extents": [0.2, 0.2, 0.2]},
            }
        )
        assert isinstance(t.shape, SmoothUnion)
        assert isinstance(t.shape.a, Sphere)
        assert isinstance(t.shape.b, Box)

    def test_knf_out_override(self, run_config_path, monkeypatch, tmp_path):
        monkeypatch.setenv("KNF_OUT", str(tmp_path / "elsewhere"))
        cfg = load_run_config(run_config_path)
        assert cfg.out_dir.endswith("elsewhere")


class TestSceneConfig:
    def test_scene_with_neural_object(self, tmp_path, small_field):
        model = tmp_path / "m.knf"
        save_model(small_field, model)
        scene_file = tmp_path / "scene.toml"
        scene_file.write_text(
            """
[environment]
kind = "constant"
rgb = [0.9, 0.9, 0.9]

[[objects]]
kind = "quad"
corner = [-2.0, -0.6, -5.0]
edge_u = [4.0, 0.0, 0.0]
edge_v = [0.0, 0.0, 4.0]
material = "lambertian"
albedo = [0.6, 0.6, 0.6]

[[objects]]
kind = "neural"
model = "m.knf"
translation = [0.0, 0.0, -2.0]
scale = 0.8
"""
        )
        scene = load_scene(scene_file)
        assert len(scene.objects) == 2
        assert scene.objects[1].scale == 0.8

    def test_unknown_object_kind(self, tmp_path):
        p = tmp_path / "s.toml"
        p.write_text("[[objects]]\nkind = \"mystery\"\n")
        with pytest.raises(ConfigError):
            load_scene(p)


class TestCli:
    def test_no_args_usage_exit_2(self, capsys):
        assert cli_main([]) == 2
        assert "usage" in capsys.readouterr().err.lower()

    def test_unknown_subcommand_exit_2(self):
        assert cli_main(["frobnicate"]) == 2

    def test_missing_file_exit_1(self, capsys):
        assert cli_main(["render", "--model", "/nope/missing.knf", "--out", "/tmp/x.png"]) == 1
        assert "error" in capsys.readouterr().err.lower()

    def test_eval_chamfer_identical_prints_zero(self, tmp_path, capsys):
        from kilofield.mesh import PointCloud, save_xyz

        cloud = PointCloud(np.random.default_rng(0).normal(size=(20, 3)))
        a = tmp_path / "a.xyz"
        save_xyz(cloud, a)
        assert cli_main(["eval", "chamfer", str(a), str(a)]) == 0
        assert float(capsys.readouterr().out.strip()) == 0.0

    def test_render_writes_image(self, tmp_path, small_field):
        model = tmp_path / "m.knf"
        save_model(small_field, model)
        out = tmp_path / "img.png"
        rc = cli_main(
            ["render", "--model", str(model), "--out", str(out), "--size", "16x16", "--pass", "normal"]
        )
        assert rc == 0 and out.exists()
        img = images.read_png(out)
        assert img.shape == (16, 16, 3)

    def test_render_depth_raster(self, tmp_path, small_field):
        model = tmp_path / "m.knf"
        save_model(small_field, model)
        out = tmp_path / "img.ppm"
        depth = tmp_path / "d.f32"
        rc = cli_main(
            ["render", "--model", str(model), "--out", str(out), "--depth-out", str(depth), "--size", "8x8"]
        )
        assert rc == 0
        d = images.read_depth_raster(depth)
        assert d.shape == (8, 8)

    def test_extract_mesh_then_eval(self, tmp_path, capsys):
        """Distilled-ish path: mesh a simple analytic-like field via the CLI."""
        from kilofield import mesh as meshmod

        field = field_init(GridConfig(resolution=2), seed=0)
        model = tmp_path / "m.knf"
        save_model(field, model)
        obj = tmp_path / "m.obj"
        rc = cli_main(["extract-mesh", "--model", str(model), "--resolution", "24", "--out", str(obj)])
        assert rc == 0 and obj.exists()

    def test_pipeline_distill_smoke(self, run_config_path, tmp_path, capsys):
        rc = cli_main(["distill", "--config", str(run_config_path)])
        assert rc == 0
        out_dir = tmp_path / "out"
        assert (out_dir / "distilled.knf").exists()
        csv_text = (out_dir / "distill_loss.csv").read_text()
        assert csv_text.splitlines()[0] == "step,lr,loss_sdf,loss_color,loss"
        assert len(csv_text.splitlines()) == 4  # header + 3 steps

    def test_pipeline_finetune_smoke(self, run_config_path, tmp_path):
        assert cli_main(["distill", "--config", str(run_config_path)]) == 0
        model = tmp_path / "out" / "distilled.knf"
        rc = cli_main(["finetune", "--config", str(run_config_path), "--model", str(model)])
        assert rc == 0
        assert (tmp_path / "out" / "finetuned.knf").exists()
        csv_text = (tmp_path / "out" / "finetune_loss.csv").read_text()
        assert csv_text.splitlines()[0] == "step,lr,loss_color,loss_eikonal,s"

    def test_make_dataset_deterministic(self, run_config_path, tmp_path):
        assert cli_main(["make-dataset", "--config", str(run_config_path)]) == 0
        first = (tmp_path / "out" / "dataset.npz").read_bytes()
        assert cli_main(["make-dataset", "--config", str(run_config_path)]) == 0
        second = (tmp_path / "out" / "dataset.npz").read_bytes()
        assert first == second

    def test_pathtrace_scene(self, tmp_path):
        scene_file = tmp_path / "scene.toml"
        scene_file.write_text(
            """
[environment]
rgb = [0.8, 0.8, 0.8]

[[objects]]
kind = "sphere"
center = [0.0, 0.0, 0.0]
radius = 0.5
albedo = [0.7, 0.3, 0.2]
"""
        )
        out = tmp_path / "pt.png"
        rc = cli_main(["pathtrace", "--scene", str(scene_file), "--out", str(out), "--spp", "2", "--size", "12x12"])
        assert rc == 0 and out.exists()


class TestImagesIO:
    def test_ppm_roundtrip(self, tmp_path, rng):
        img = (rng.uniform(size=(9, 7, 3)) * 255).astype(np.uint8)
        p = tmp_path / "t.ppm"
        images.write_ppm(p, img)
        np.testing.assert_array_equal(images.read_ppm(p), img)

    def test_png_roundtrip(self, tmp_path, rng):
        img = (rng.uniform(size=(5, 6, 3)) * 255).astype(np.uint8)
        p = tmp_path / "t.png"
        images.write_png(p, img)
        np.testing.assert_array_equal(images.read_png(p), img)

    def test_depth_roundtrip(self, tmp_path, rng):
        d = rng.uniform(size=(4, 5)).astype(np.float32)
        p = tmp_path / "d.f32"
        images.write_depth_raster(p, d)
        np.testing.assert_array_equal(images.read_depth_raster(p), d)
        assert p.stat().st_size == 16 + 4 * 20
