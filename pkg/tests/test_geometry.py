import numpy as np
import pytest

from Models.state import Grid, LevelSetField
from Services.compute import (
    build_geometry,
    clip_liquid_polygon,
    compute_curvature,
    compute_normals,
    get_area,
    interpolate,
    normal_gradients,
)
from Services.errors import DomainError, GridMismatchError
from tests.conftest import H0


def test_polygon_area():
    assert get_area([[0, 0], [1, 0], [1, 1], [0, 1]]) == pytest.approx(1.0)
    assert get_area([[0, 0], [1, 0], [0, 1]]) == pytest.approx(0.5)
    assert get_area([[0, 0], [1, 1]]) == 0.0


def test_clip_keeps_positive_half_of_square():
    square = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    poly = clip_liquid_polygon(square, np.array([1.0, 1.0, -1.0, -1.0]))
    assert get_area(poly) == pytest.approx(0.5)
    assert get_area(clip_liquid_polygon(square, -np.ones(4))) == 0.0


def test_grid_requires_square_cells():
    with pytest.raises(DomainError):
        Grid(nx=10, ny=16, aspect_ratio=0.5)
    grid = Grid.from_ny(32, 4.0)
    assert grid.shape == (128, 32)
    assert grid.delta == pytest.approx(1 / 32)
    with pytest.raises(GridMismatchError):
        LevelSetField(grid, np.zeros((4, 4)))


def test_flat_front_cut_cells(grid, flat_geometry):
    geom = flat_geometry
    cut_rows = np.unique(geom.cut_cells[:, 1])
    assert cut_rows.tolist() == [4]
    assert geom.n_segments == grid.nx
    np.testing.assert_allclose(geom.fraction[:, :4], 1.0)
    np.testing.assert_allclose(geom.fraction[:, 4], 0.8, atol=1e-12)
    np.testing.assert_allclose(geom.fraction[:, 5:], 0.0)
    assert geom.seg_length.sum() == pytest.approx(grid.width)
    np.testing.assert_allclose(geom.seg_mid[:, 1], H0, atol=1e-12)
    assert geom.liquid_volume() == pytest.approx(H0 * grid.width)


def test_flat_front_normals_point_into_liquid(flat_geometry):
    np.testing.assert_allclose(flat_geometry.seg_normal[:, 0], 0.0, atol=1e-12)
    np.testing.assert_allclose(flat_geometry.seg_normal[:, 1], -1.0, atol=1e-12)


def test_classification_codes(flat_geometry):
    codes = flat_geometry.classification
    assert set(np.unique(codes).tolist()) == {0, 1, 2}
    assert (codes[:, 4] == flat_geometry.CUT).all()


def test_curvature_of_circle():
    grid = Grid(nx=64, ny=64, aspect_ratio=1.0)
    X, Y = grid.mesh()
    r = np.hypot(X - 0.5, Y - 0.5)
    R = 0.25
    ls = LevelSetField(grid, R - r)
    kappa, flagged = compute_curvature(ls)
    near = np.abs(r - R) < grid.delta
    assert near.any() and not flagged[near].any()
    np.testing.assert_allclose(kappa[near], -1.0 / r[near], rtol=0.05)


def test_vanishing_gradient_is_flagged(grid):
    ls = LevelSetField(grid, np.ones(grid.shape))
    normals = compute_normals(ls)
    assert normals.flagged.all()
    np.testing.assert_allclose(normals.ny, -1.0)


def test_interpolate_reproduces_linear_profile(grid):
    _, Y = grid.mesh()
    field = 3.0 * Y + 1.0
    points = np.array([[0.1, 0.05], [0.31, 0.5], [0.2, 0.97], [0.49, 0.2]])
    np.testing.assert_allclose(interpolate(field, points, grid), 3.0 * points[:, 1] + 1.0, atol=1e-12)


def test_one_sided_normal_gradients(grid, conduction, flat_geometry, steady_temperature):
    w = -0.5
    g_l, flag_l = normal_gradients(steady_temperature, flat_geometry, 0.0, "liquid", conduction.T_b, w)
    g_s, flag_s = normal_gradients(steady_temperature, flat_geometry, 0.0, "solid", conduction.T_b, w)
    assert not flag_l.any() and not flag_s.any()
    np.testing.assert_allclose(g_l, conduction.T_b / H0, rtol=1e-10)
    np.testing.assert_allclose(g_s, -w / (1.0 - H0), rtol=1e-10)


def test_empty_geometry_has_no_segments(grid):
    _, Y = grid.mesh()
    geom = build_geometry(LevelSetField(grid, 2.0 - Y))
    assert geom.n_segments == 0
    assert geom.liquid.all()
    g, flagged = normal_gradients(np.zeros(grid.shape), geom, 0.0, "liquid", 0.7, -0.5)
    assert g.size == 0 and flagged.size == 0


def test_normals_of_circle_are_radial():
    grid = Grid(nx=64, ny=64, aspect_ratio=1.0)
    X, Y = grid.mesh()
    r = np.hypot(X - 0.5, Y - 0.5)
    geom = build_geometry(LevelSetField(grid, 0.25 - r))
    ci, cj = geom.cut_cells[:, 0], geom.cut_cells[:, 1]
    radial = np.stack([(X - 0.5) / r, (Y - 0.5) / r], axis=-1)[ci, cj]
    assert geom.n_segments > 0
    deviation = np.hypot(geom.seg_normal[:, 0] + radial[:, 0], geom.seg_normal[:, 1] + radial[:, 1])
    assert deviation.max() < 2 * grid.delta


def test_thin_layer_uses_one_sided_fallback(grid):
    # liquid only between y = 0.2 and y = 0.3: two rows, so every sample point touches the solid
    _, Y = grid.mesh()
    geom = build_geometry(LevelSetField(grid, (Y - 0.2) * (0.3 - Y)))
    assert sorted(np.unique(geom.cut_cells[:, 1]).tolist()) == [3, 4]
    field = 2.0 * (0.3 - Y)
    on_front = 2.0 * (0.3 - geom.seg_mid[:, 1])
    g, flagged = normal_gradients(field, geom, on_front, "liquid", 0.0, 0.0)
    assert flagged.all()
    np.testing.assert_allclose(g, -2.0 * geom.seg_normal[:, 1], rtol=1e-10)
    assert np.all(g != 0.0)
