import numpy as np
import pytest

from kilofield.cameras import look_at_pose, pixel_rays
from kilofield.pathtrace import (
    _PRIMARY_SLOT,
    BoxObj,
    ConstantEnv,
    Emissive,
    Lambertian,
    LatLongEnvMap,
    QuadObj,
    Rng,
    Scene,
    SphereObj,
    intersect_scene,
    render_pathtraced,
    sample_lambertian,
    trace_path,
)
from kilofield.surface import Ray


class TestRng:
    def test_deterministic(self):
        a = Rng(5).uniform(np.arange(10), 3, 7)
        b = Rng(5).uniform(np.arange(10), 3, 7)
        np.testing.assert_array_equal(a, b)

    def test_in_unit_interval_and_spread(self):
        u = Rng(1).uniform(np.arange(20000), 0, 0)
        assert np.all((u >= 0) & (u < 1))
        assert abs(u.mean() - 0.5) < 0.01
        assert abs(u.var() - 1 / 12) < 0.01

    def test_streams_differ_by_any_counter(self):
        r = Rng(2)
        base = r.uniform(7, 1, 1)
        assert r.uniform(8, 1, 1) != base
        assert r.uniform(7, 2, 1) != base
        assert r.uniform(7, 1, 2) != base
        assert Rng(3).uniform(7, 1, 1) != base


class TestSampleLambertian:
    def test_upper_hemisphere_and_pdf(self, rng):
        n = rng.normal(size=(500, 3))
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        u1 = rng.uniform(size=500)
        u2 = rng.uniform(size=500)
        d, pdf = sample_lambertian(n, (u1, u2))
        assert np.all(np.sum(d * n, axis=1) >= -1e-12)
        assert np.all(pdf > 0)
        np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-9)

    def test_cosine_mean_two_thirds(self):
        m = 100_000
        r = np.random.default_rng(3)
        n = np.tile([0.0, 0.0, 1.0], (m, 1))
        d, _ = sample_lambertian(n, (r.uniform(size=m), r.uniform(size=m)))
        cos = d[:, 2]
        # Var(cos) under pdf 2c: E[c^2]=1/2 -> var = 1/2 - 4/9
        sigma = np.sqrt((0.5 - 4 / 9) / m)
        assert abs(cos.mean() - 2 / 3) <= 3 * sigma


class TestIntersectScene:
    def test_nearer_sphere_wins(self):
        scene = Scene(
            [
                SphereObj((0, 0, -3), 0.5, Lambertian()),
                SphereObj((0, 0, -6), 0.5, Lambertian()),
            ]
        )
        t, obj, _ = intersect_scene(scene, np.array([[0.0, 0, 0]]), np.array([[0.0, 0, -1.0]]))
        assert obj[0] == 0 and t[0] == pytest.approx(2.5)

    def test_behind_camera_ignored(self):
        scene = Scene([SphereObj((0, 0, 3), 0.5, Lambertian())])
        t, obj, _ = intersect_scene(scene, np.array([[0.0, 0, 0]]), np.array([[0.0, 0, -1.0]]))
        assert obj[0] == -1 and np.isinf(t[0])

    def test_quad_and_box(self):
        scene = Scene(
            [
                QuadObj((-1, -1, -2), (2, 0, 0), (0, 2, 0), Lambertian()),
                BoxObj((-0.5, -0.5, -1.2), (0.5, 0.5, -0.8), Lambertian()),
            ]
        )
        t, obj, _ = intersect_scene(scene, np.array([[0.0, 0, 0]]), np.array([[0.0, 0, -1.0]]))
        assert obj[0] == 1 and t[0] == pytest.approx(0.8)
        t, obj, _ = intersect_scene(scene, np.array([[0.9, 0.9, 0]]), np.array([[0.0, 0, -1.0]]))
        assert obj[0] == 0 and t[0] == pytest.approx(2.0)


class TestTracePath:
    def test_empty_scene_returns_env(self):
        scene = Scene([], ConstantEnv((0.2, 0.5, 0.9)))
        out = trace_path(scene, Ray((0, 0, 0), (0, 0, -1)), Rng(0))
        np.testing.assert_allclose(out, [0.2, 0.5, 0.9])

    def test_white_furnace_exact(self):
        scene = Scene([SphereObj((0, 0, -3), 1.0, Lambertian((1, 1, 1)))], ConstantEnv((0.7, 0.7, 0.7)))
        for px in range(20):
            out = trace_path(scene, Ray((0, 0, 0), (0, 0, -1)), Rng(9), pixel=px)
            np.testing.assert_allclose(out, [0.7, 0.7, 0.7], rtol=1e-12)

    def test_gray_sphere_single_bounce_half_env(self):
        E = 0.8
        scene = Scene([SphereObj((0, 0, -3), 1.0, Lambertian((0.5, 0.5, 0.5)))], ConstantEnv((E, E, E)))
        vals = [trace_path(scene, Ray((0, 0, 0), (0, 0, -1)), Rng(4), pixel=p, max_bounces=1) for p in range(64)]
        mean = np.mean(vals, axis=0)
        np.testing.assert_allclose(mean, 0.5 * E, rtol=1e-2)

    def test_emissive_quad_terminates(self):
        scene = Scene(
            [QuadObj((-1, -1, -2), (2, 0, 0), (0, 2, 0), Emissive((3.0, 2.0, 1.0)))],
            ConstantEnv((0, 0, 0)),
        )
        out = trace_path(scene, Ray((0, 0, 0), (0, 0, -1)), Rng(0))
        np.testing.assert_allclose(out, [3.0, 2.0, 1.0])

    def test_radiance_finite_nonnegative(self, rng):
        scene = Scene(
            [
                SphereObj((0, -0.2, -3), 0.8, Lambertian((0.9, 0.5, 0.3))),
                QuadObj((-4, -1, -7), (8, 0, 0), (0, 0, 8), Lambertian((0.6, 0.6, 0.6))),
            ],
            ConstantEnv((1.0, 0.9, 0.8)),
        )
        for p in range(32):
            d = rng.normal(size=3) * 0.2 + [0, 0, -1]
            d /= np.linalg.norm(d)
            out = trace_path(scene, Ray((0, 0, 0), tuple(d)), Rng(11), pixel=p)
            assert np.all(np.isfinite(out)) and np.all(out >= 0)


class TestRenderPathtraced:
    def _simple_scene(self):
        return Scene([SphereObj((0, 0, 0), 0.5, Lambertian((0.6, 0.4, 0.3)))], ConstantEnv((1, 1, 1)))

    def test_spp1_equals_single_trace_path(self):
        scene = self._simple_scene()
        pose = look_at_pose((0, 0, 2.5), (0, 0, 0), (0, 1, 0), 0.7, 6, 6)
        result = render_pathtraced(scene, pose, spp=1, seed=3)
        rng = Rng(3)
        for py in range(6):
            for px in range(6):
                pid = py * 6 + px
                jx = rng.uniform(pid, 0, _PRIMARY_SLOT)
                jy = rng.uniform(pid, 0, _PRIMARY_SLOT + 1)
                o, d = pixel_rays(pose, np.array([[px, py]]), jitter=np.array([[jx, jy]]))
                expect = trace_path(scene, Ray(o[0], d[0]), rng, pixel=pid, sample=0)
                np.testing.assert_allclose(result.hdr[py, px], expect, rtol=1e-12)

    def test_same_seed_same_image(self):
        scene = self._simple_scene()
        pose = look_at_pose((0, 0, 2.5), (0, 0, 0), (0, 1, 0), 0.7, 8, 8)
        a = render_pathtraced(scene, pose, spp=2, seed=5)
        b = render_pathtraced(scene, pose, spp=2, seed=5)
        np.testing.assert_array_equal(a.hdr, b.hdr)

    def test_thread_count_invariant(self, monkeypatch):
        scene = self._simple_scene()
        pose = look_at_pose((0, 0, 2.5), (0, 0, 0), (0, 1, 0), 0.7, 16, 16)
        monkeypatch.setenv("KNF_THREADS", "1")
        a = render_pathtraced(scene, pose, spp=2, seed=5, tile_rows=4)
        monkeypatch.setenv("KNF_THREADS", "3")
        b = render_pathtraced(scene, pose, spp=2, seed=5, tile_rows=4)
        np.testing.assert_array_equal(a.hdr, b.hdr)

    def test_ldr_is_gamma_of_clipped_hdr(self):
        scene = self._simple_scene()
        pose = look_at_pose((0, 0, 2.5), (0, 0, 0), (0, 1, 0), 0.7, 4, 4)
        r = render_pathtraced(scene, pose, spp=1, seed=0)
        np.testing.assert_allclose(r.ldr, np.clip(r.hdr, 0, 1) ** (1 / 2.2))

    def test_furnace_small(self):
        scene = Scene([SphereObj((0, 0, 0), 0.5, Lambertian((1, 1, 1)))], ConstantEnv((0.6, 0.6, 0.6)))
        pose = look_at_pose((0, 0, 2), (0, 0, 0), (0, 1, 0), 0.7, 12, 12)
        r = render_pathtraced(scene, pose, spp=8, seed=2)
        assert np.abs(r.hdr - 0.6).max() <= 1e-9  # convex furnace is exact per path

    def test_occluder_darkens_floor(self):
        """Object over a floor quad blocks sky light in the contact region."""
        floor = QuadObj((-3, -0.8, -6), (6, 0, 0), (0, 0, 6), Lambertian((0.7, 0.7, 0.7)))
        blocker = BoxObj((-0.7, -0.75, -3.8), (0.7, 0.4, -2.4), Lambertian((0.7, 0.7, 0.7)))
        env = ConstantEnv((1, 1, 1))
        pose = look_at_pose((0, 0.6, 0.5), (0, -0.8, -3), (0, 1, 0), np.deg2rad(55), 32, 32)
        with_obj = render_pathtraced(Scene([floor, blocker], env), pose, spp=24, seed=1)
        without = render_pathtraced(Scene([floor], env), pose, spp=24, seed=1)
        # select pixels whose primary hit lands on the floor under the blocker
        origins, dirs = pixel_rays(pose)
        t, obj, _ = intersect_scene(Scene([floor], env), origins, dirs)
        pos = origins + np.where(np.isfinite(t), t, 0)[:, None] * dirs
        under = (
            (obj == 0)
            & (np.abs(pos[:, 0]) < 0.6)
            & (pos[:, 2] > -3.7)
            & (pos[:, 2] < -2.5)
        ).reshape(32, 32)
        assert under.sum() > 20
        lum_with = with_obj.hdr[under].mean()
        lum_without = without.hdr[under].mean()
        assert lum_with <= 0.9 * lum_without


class TestEnvMap:
    def test_latlong_lookup_directions(self):
        img = np.zeros((4, 8, 3))
        img[0, :, :] = [1, 0, 0]  # top rows = +y pole
        img[-1, :, :] = [0, 1, 0]
        env = LatLongEnvMap(img)
        up = env.radiance(np.array([[0.0, 1.0, 0.0]]))
        down = env.radiance(np.array([[0.0, -1.0, 0.0]]))
        assert up[0][0] > 0.9 and down[0][1] > 0.9

    def test_bilinear_in_range(self, rng):
        img = rng.uniform(size=(8, 16, 3))
        env = LatLongEnvMap(img)
        d = rng.normal(size=(200, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        c = env.radiance(d)
        assert np.all(c >= 0) and np.all(c <= 1)
