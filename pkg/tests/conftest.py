import numpy as np
import pytest

from kilofield.grid import GridConfig, field_init
from kilofield.teacher import AnalyticTeacher, FlatAlbedo, PositionStripes, Sphere


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def small_field():
    """Random 4^3 field, fp32, fresh per test."""
    return field_init(GridConfig(resolution=4), seed=7)


@pytest.fixture
def tiny_field64():
    """2^3 float64 field with 8-wide MLPs for gradient oracles."""
    from kilofield.grid import COLOR_ACTIVATIONS, SDF_ACTIVATIONS, KiloField, MlpGrid

    cfg = GridConfig(resolution=2, feature_dim=4)
    r = np.random.default_rng(11)
    sdf = MlpGrid.init(cfg.n_cells, [39, 8, 8, 5], SDF_ACTIVATIONS, r, np.float64)
    color = MlpGrid.init(cfg.n_cells, [3 + 27 + 3 + 4, 8, 8, 3], COLOR_ACTIVATIONS, r, np.float64)
    for c in range(cfg.n_cells):
        sdf.biases[-1][c, 0] = 0.1 * r.normal()
    return KiloField(cfg, sdf, color, np.array(np.log(12.0)))


@pytest.fixture
def sphere_teacher():
    return AnalyticTeacher(Sphere((0.0, 0.0, 0.0), 0.5), FlatAlbedo((0.8, 0.2, 0.2)))


@pytest.fixture
def stripes_teacher():
    return AnalyticTeacher(
        Sphere((0.0, 0.0, 0.0), 0.5),
        PositionStripes(0, 0.4, (0.9, 0.6, 0.2), (0.2, 0.3, 0.8)),
    )
