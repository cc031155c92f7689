import numpy as np
import pytest

from Models.state import Grid, LevelSetField, PhysicalParams
from Services.compute import build_geometry

H0 = 0.3


@pytest.fixture
def grid():
    # 8 x 16 cells, delta = 1/16; a flat front at 0.3 sits inside row 4
    return Grid(nx=8, ny=16, aspect_ratio=0.5)


@pytest.fixture
def conduction():
    return PhysicalParams(Ra=0.0, Pr=1.0, St=1.0, T_b=0.7, T_M=0.0, h0=H0)


@pytest.fixture
def flat_front(grid):
    _, Y = grid.mesh()
    return LevelSetField(grid, H0 - Y)


@pytest.fixture
def flat_geometry(flat_front):
    return build_geometry(flat_front)


def piecewise_linear_temperature(grid, h, T_b, w):
    """Steady conduction profile: T_b -> 0 over the melt, 0 -> w over the solid."""
    _, Y = grid.mesh()
    return np.where(Y < h, T_b * (h - Y) / h, w * (Y - h) / (grid.height - h))


@pytest.fixture
def steady_temperature(grid, conduction):
    return piecewise_linear_temperature(grid, H0, conduction.T_b, -0.5)
