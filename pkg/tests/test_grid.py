import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kilofield import grid as gridmod
from kilofield import nn
from kilofield.grid import (
    DegenerateGradientError,
    GridConfig,
    cell_index,
    cell_index_flat,
    color_query,
    field_init,
    grad_fd,
    grid_backward,
    grid_forward,
    grouped_query,
    normal,
    normal_batch,
    route,
    sdf_query,
    sdf_values,
    seam_jump_stats,
)


def naive_sdf_query(field, pts):
    """Per-point oracle: route, encode, and evaluate one point at a time."""
    out = np.empty((len(pts), 1 + field.config.feature_dim), dtype=np.float64)
    for k in range(len(pts)):
        i, j, l = cell_index(field.config, pts[k])
        enc = nn.fourier_encode(np.asarray(pts[k], dtype=field.dtype), field.config.sdf_freqs)
        out[k] = nn.mlp_forward(field.sdf_mlp(i, j, l), enc)
    return out


class TestCellIndex:
    def test_corner(self):
        cfg = GridConfig(resolution=16)
        assert cell_index(cfg, (-1.0, -1.0, -1.0)) == (0, 0, 0)

    def test_midpoint_routes_up(self):
        cfg = GridConfig(resolution=16)
        assert cell_index(cfg, (0.0, 0.0, 0.0)) == (8, 8, 8)

    def test_clamp_outside(self):
        cfg = GridConfig(resolution=16)
        assert cell_index(cfg, (2.0, 0.0, 0.0)) == (15, 8, 8)

    @given(
        st.floats(-1e6, 1e6), st.floats(-1e6, 1e6), st.floats(-1e6, 1e6),
        st.integers(1, 32),
    )
    @settings(max_examples=200, deadline=None)
    def test_total_and_in_range(self, x, y, z, n):
        cfg = GridConfig(resolution=n)
        i, j, k = cell_index(cfg, (x, y, z))
        assert 0 <= i < n and 0 <= j < n and 0 <= k < n

    def test_piecewise_constant_inside_cell(self, rng):
        cfg = GridConfig(resolution=8)
        base = rng.uniform(-1, 1, 3)
        idx = cell_index(cfg, base)
        size = cfg.cell_size
        lo = cfg.bbox_min + np.array(idx) * size
        for _ in range(20):
            p = lo + rng.uniform(0.01, 0.99, 3) * size
            assert cell_index(cfg, p) == idx


class TestSdfQuery:
    def test_single_point_is_direct_forward(self, small_field, rng):
        p = rng.uniform(-1, 1, 3).astype(np.float32)
        sample = sdf_query(small_field, p)
        i, j, k = cell_index(small_field.config, p)
        direct = nn.mlp_forward(small_field.sdf_mlp(i, j, k), nn.fourier_encode(p, 6))
        np.testing.assert_allclose(sample.value[0], direct[0], atol=1e-6)
        np.testing.assert_allclose(sample.features[0], direct[1:], atol=1e-6)

    def test_grouped_matches_naive_loop(self, small_field, rng):
        pts = rng.uniform(-1.3, 1.3, size=(2000, 3)).astype(np.float32)
        sample = sdf_query(small_field, pts)
        ref = naive_sdf_query(small_field, pts)
        assert np.abs(sample.value - ref[:, 0]).max() <= 1e-6
        assert np.abs(sample.features - ref[:, 1:]).max() <= 1e-6

    def test_same_cell_same_parameters(self, small_field):
        cfg = small_field.config
        a = np.array([0.01, 0.01, 0.01], dtype=np.float32)
        b = np.array([0.02, 0.03, 0.04], dtype=np.float32)
        assert cell_index(cfg, a) == cell_index(cfg, b)
        i, j, k = cell_index(cfg, a)
        mlp = small_field.sdf_mlp(i, j, k)
        for p, expect in ((a, None), (b, None)):
            got = sdf_query(small_field, p)
            direct = nn.mlp_forward(mlp, nn.fourier_encode(p, 6))
            np.testing.assert_allclose(got.value[0], direct[0], atol=1e-6)


class TestColorQuery:
    def _dirs(self, rng, n):
        v = rng.normal(size=(n, 3))
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    def test_channels_in_unit_interval(self, small_field, rng):
        n = 50
        x = rng.uniform(-1, 1, size=(n, 3)).astype(np.float32)
        z = rng.normal(size=(n, small_field.config.feature_dim)).astype(np.float32)
        c = color_query(small_field, x, self._dirs(rng, n), self._dirs(rng, n), z)
        assert np.all(c > 0) and np.all(c < 1)

    def test_zero_weight_color_mlp_gives_half(self, small_field, rng):
        for w in small_field.color.weights:
            w[...] = 0
        for b in small_field.color.biases:
            b[...] = 0
        x = rng.uniform(-1, 1, size=(4, 3)).astype(np.float32)
        z = np.zeros((4, small_field.config.feature_dim), dtype=np.float32)
        c = color_query(small_field, x, self._dirs(rng, 4), self._dirs(rng, 4), z)
        np.testing.assert_allclose(c, 0.5, atol=1e-7)

    def test_batch_matches_per_point(self, small_field, rng):
        n = 64
        x = rng.uniform(-1, 1, size=(n, 3)).astype(np.float32)
        v = self._dirs(rng, n).astype(np.float32)
        nrm = self._dirs(rng, n).astype(np.float32)
        z = rng.normal(size=(n, small_field.config.feature_dim)).astype(np.float32)
        batch = color_query(small_field, x, v, nrm, z)
        for k in range(0, n, 7):
            single = color_query(small_field, x[k], v[k], nrm[k], z[k])[0]
            assert np.abs(batch[k] - single).max() <= 1e-6


class TestGroupedDispatch:
    def test_permutation_equivariance(self, small_field, rng):
        pts = rng.uniform(-1, 1, size=(300, 3)).astype(np.float32)
        perm = rng.permutation(300)
        a = sdf_query(small_field, pts)
        b = sdf_query(small_field, pts[perm])
        np.testing.assert_array_equal(a.value[perm], b.value)
        np.testing.assert_array_equal(a.features[perm], b.features)

    def test_single_cell_batch(self, small_field, rng):
        cfg = small_field.config
        pts = (rng.uniform(0.02, 0.22, size=(40, 3))).astype(np.float32)
        ids = np.unique(cell_index_flat(cfg, pts))
        assert len(ids) == 1
        sample = sdf_query(small_field, pts)
        ref = naive_sdf_query(small_field, pts)
        assert np.abs(sample.value - ref[:, 0]).max() <= 1e-6

    def test_grouped_query_dispatcher(self, small_field, rng):
        pts = rng.uniform(-1, 1, size=(10, 3)).astype(np.float32)
        s = grouped_query(small_field, pts, "sdf")
        assert s.value.shape == (10,)
        with pytest.raises(ValueError):
            grouped_query(small_field, pts, "nope")

    def test_padded_and_loop_paths_agree(self, small_field, rng, monkeypatch):
        pts = rng.uniform(-1, 1, size=(1500, 3)).astype(np.float32)
        monkeypatch.setattr(gridmod, "_PADDED_PATH_CUTOFF", 1e18)
        padded = sdf_query(small_field, pts)
        monkeypatch.setattr(gridmod, "_PADDED_PATH_CUTOFF", 0.0)
        loop = sdf_query(small_field, pts)
        assert np.abs(padded.value - loop.value).max() <= 1e-6
        assert np.abs(padded.features - loop.features).max() <= 1e-6

    @pytest.mark.parametrize("cutoff", [0.0, 1e18])
    def test_backward_matches_per_cell_oracle(self, small_field, rng, monkeypatch, cutoff):
        """grid_backward == accumulating nn.mlp_backward per cell, both paths."""
        monkeypatch.setattr(gridmod, "_PADDED_PATH_CUTOFF", cutoff)
        cfg = small_field.config
        pts = rng.uniform(-1, 1, size=(200, 3)).astype(np.float32)
        routing = route(cfg, pts)
        enc = nn.fourier_encode(routing.sort(pts), cfg.sdf_freqs)
        out, cache = grid_forward(small_field.sdf, enc, routing, want_cache=True)
        g_out = rng.normal(size=out.shape).astype(np.float32)
        grads, g_in = grid_backward(small_field.sdf, routing, cache, g_out)

        enc_un = routing.unsort(enc)
        g_un = routing.unsort(g_out)
        ids = cell_index_flat(cfg, pts)
        expect = [np.zeros_like(p) for p in small_field.sdf.param_arrays()]
        gin_expect = np.zeros_like(enc_un)
        for ci in np.unique(ids):
            rows = ids == ci
            mlp = small_field.sdf.mlp(int(ci))
            (gw, gb), gi = nn.mlp_backward(mlp, enc_un[rows], g_un[rows])
            for li in range(len(gw)):
                expect[2 * li][ci] += gw[li]
                expect[2 * li + 1][ci] += gb[li]
            gin_expect[rows] = gi
        for a, b in zip(grads, expect):
            np.testing.assert_allclose(a, b, atol=2e-4)
        np.testing.assert_allclose(routing.unsort(g_in), gin_expect, atol=2e-5)

    def test_untouched_cells_zero_grads(self, small_field, rng):
        cfg = small_field.config
        pts = rng.uniform(0.05, 0.95, size=(50, 3)).astype(np.float32)  # one octant
        routing = route(cfg, pts)
        enc = nn.fourier_encode(routing.sort(pts), cfg.sdf_freqs)
        out, cache = grid_forward(small_field.sdf, enc, routing, want_cache=True)
        grads, _ = grid_backward(small_field.sdf, routing, cache, np.ones_like(out))
        touched = set(routing.cells.tolist())
        for ci in range(cfg.n_cells):
            if ci not in touched:
                assert all(np.all(g[ci] == 0) for g in grads)


class TestMlpGridViews:
    def test_view_mutation_writes_through(self, small_field):
        mlp = small_field.sdf.mlp(3)
        mlp.weights[0][0, 0] = 123.0
        assert small_field.sdf.weights[0][3, 0, 0] == 123.0


class AnalyticProxy:
    """Patches module-level sdf_values so grad_fd runs on a closed-form SDF."""

    def __init__(self, monkeypatch, field, fn):
        def fake(f, pts):
            return fn(np.atleast_2d(np.asarray(pts, dtype=np.float64)))
        monkeypatch.setattr(gridmod, "sdf_values", fake)


class TestGradFd:
    def test_matches_analytic_gradient(self, small_field, rng, monkeypatch):
        center = np.array([0.1, -0.2, 0.3])
        AnalyticProxy(monkeypatch, small_field, lambda p: np.linalg.norm(p - center, axis=1) - 0.4)
        x = rng.uniform(-0.9, 0.9, size=(30, 3))
        x = x[np.linalg.norm(x - center, axis=1) > 0.05]
        g = grad_fd(small_field, x)
        expect = (x - center) / np.linalg.norm(x - center, axis=1, keepdims=True)
        assert np.abs(g - expect).max() < 1e-5

    def test_second_order_convergence(self, small_field, monkeypatch):
        """Halving h shrinks the FD error of a smooth SDF about 4x."""
        AnalyticProxy(monkeypatch, small_field, lambda p: np.sin(p[:, 0]) + np.cos(2 * p[:, 1]) + p[:, 2])
        x = np.array([[0.3, 0.2, -0.1]])
        exact = np.array([np.cos(0.3), -2 * np.sin(0.4), 1.0])
        errs = []
        for h in (2e-2, 1e-2):
            small_field.config.fd_step = h
            errs.append(np.abs(grad_fd(small_field, x)[0] - exact).max())
        ratio = errs[0] / errs[1]
        assert 3.0 < ratio < 5.0

    def test_one_sided_at_boundary(self, small_field, monkeypatch):
        AnalyticProxy(monkeypatch, small_field, lambda p: p[:, 0] * 2.0)
        g = grad_fd(small_field, np.array([[1.0, 0.0, 0.0]]))  # at bbox_max x
        np.testing.assert_allclose(g[0], [2.0, 0.0, 0.0], atol=1e-6)


class TestNormal:
    def test_unit_norm(self, small_field, rng):
        x = rng.uniform(-0.9, 0.9, size=(40, 3))
        nrm, ok = normal_batch(small_field, x)
        assert np.abs(np.linalg.norm(nrm[ok], axis=1) - 1.0).max() <= 1e-6

    def test_degenerate_gradient_raises_not_nan(self, small_field):
        for w in small_field.sdf.weights:
            w[...] = 0
        for b in small_field.sdf.biases:
            b[...] = 0
        with pytest.raises(DegenerateGradientError):
            normal(small_field, np.array([0.2, 0.2, 0.2]))


class TestSeamMetric:
    def test_stats_shape(self, small_field):
        stats = seam_jump_stats(small_field, n_pairs=512, seed=1)
        assert set(stats) == {"p50", "p99", "max", "mean"}
        assert 0 <= stats["p50"] <= stats["p99"] <= stats["max"]

    def test_deliberate_offset_raises_p99(self, small_field):
        # flatten the field so the only discontinuity is the one we inject
        for w in small_field.sdf.weights:
            w[...] = 0
        for b in small_field.sdf.biases:
            b[...] = 0
        assert seam_jump_stats(small_field, n_pairs=4096, seed=2)["p99"] == 0.0
        small_field.sdf.biases[-1][:32, 0] += 0.5  # offset the lower-x half
        bumped = seam_jump_stats(small_field, n_pairs=4096, seed=2)["p99"]
        assert bumped > 0.4
