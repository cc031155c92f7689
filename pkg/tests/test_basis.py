import numpy as np
import pytest

from Models.state import ControlVector, Grid
from Services.basis import CLAMP_MARGIN, Basis, eval_basis, project_gradient
from Services.errors import DomainError


@pytest.fixture
def wide_grid():
    return Grid(nx=64, ny=16, aspect_ratio=4.0)


def test_tanh_values():
    basis = Basis("tanh_basis")
    w = eval_basis(basis, [-0.1, -0.5], [0.0, 10.0])
    assert w[0] == pytest.approx(-0.6)
    assert w[1] == pytest.approx(-0.1, abs=1e-12)
    # only magnitudes matter
    np.testing.assert_allclose(eval_basis(basis, [0.1, 0.5], [0.3]), eval_basis(basis, [-0.1, -0.5], [0.3]))


def test_tanh_jacobian_uses_sign_one_at_zero():
    basis = Basis("tanh_basis")
    J = basis.jacobian([0.0, -0.5], np.array([0.0]))
    np.testing.assert_allclose(J, [[-1.0, 1.0]])


def test_trig_basis_is_linear_in_coefficients(wide_grid):
    basis = Basis("trig_power_basis")
    rng = np.random.default_rng(2)
    a = rng.standard_normal(8)
    x = wide_grid.centered_x()
    np.testing.assert_allclose(basis.jacobian(a, x) @ a, basis.evaluate(a, x), atol=1e-12)
    np.testing.assert_allclose(basis.evaluate(np.zeros(8), x), 0.0)


def test_wall_is_clamped_below_melting(wide_grid, caplog):
    basis = Basis("tanh_basis")
    with caplog.at_level("INFO", logger="Services.basis"):
        w = basis.wall([0.0, 0.0], wide_grid)
    np.testing.assert_allclose(w, -CLAMP_MARGIN)
    assert "clamped" in caplog.text
    assert (basis.wall([-0.2, -1.0], wide_grid, T_M=0.0) < 0).all()


def test_dimension_and_kind_are_checked():
    with pytest.raises(DomainError):
        Basis("legendre")
    with pytest.raises(DomainError):
        Basis("tanh_basis").evaluate([1.0, 2.0, 3.0], np.zeros(3))
    assert Basis("trig_power_basis").dimension == len(ControlVector(np.zeros(8)))
    with pytest.raises(DomainError):
        ControlVector([0.0, np.inf])


def test_chain_gradient_applies_jacobian(wide_grid):
    basis = Basis("tanh_basis")
    a = np.array([-0.2, -0.4])
    rng = np.random.default_rng(4)
    g = rng.standard_normal(wide_grid.nx)
    J = basis.jacobian(a, wide_grid.centered_x())
    np.testing.assert_allclose(project_gradient(basis, a, wide_grid, g), J.T @ g)


def test_fit_gradient_recovers_coefficients(wide_grid):
    basis = Basis("tanh_basis")
    a = np.array([-0.2, -0.4])
    c = np.array([0.7, -1.3])
    J = basis.jacobian(a, wide_grid.centered_x())
    g = wide_grid.delta * (J @ c)
    np.testing.assert_allclose(project_gradient(basis, a, wide_grid, g, mode="fit"), c, atol=1e-10)


def test_project_gradient_rejects_bad_input(wide_grid):
    basis = Basis("tanh_basis")
    with pytest.raises(DomainError):
        project_gradient(basis, [-0.1, 0.0], wide_grid, np.zeros(wide_grid.nx + 1))
    with pytest.raises(DomainError):
        project_gradient(basis, [-0.1, 0.0], wide_grid, np.zeros(wide_grid.nx), mode="newton")
