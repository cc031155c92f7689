import numpy as np
import pytest

from Models.state import (
    AdjointState,
    Checkpoint,
    CostWeights,
    DesiredState,
    FlowState,
    Grid,
    LevelSetField,
    PhysicalParams,
    Trajectory,
)
from Services.adjoint import (
    AdjointOptions,
    assemble_gradient,
    cost_terms,
    evaluate_cost,
    run_adjoint,
    step_adjoint_liquid,
    step_adjoint_solid,
    terminal_conditions,
)
from Services.basis import Basis
from Services.compute import build_geometry
from Services.errors import DomainError, GridMismatchError
from Services.forward import run_forward, step_liquid_temp, step_solid_heat
from Services.optimize import ControlProblem, cosine_similarity, fd_gradient
from tests.conftest import H0


def _trajectory(grid, T_final, phi_final, duration=0.1, w=-0.5):
    zeros = np.zeros(grid.shape)
    v = np.zeros((grid.nx, grid.ny + 1))
    start = Checkpoint(index=0, time=0.0, T=zeros, u=zeros, v=v, p=zeros, phi=phi_final)
    end = Checkpoint(index=1, time=duration, T=T_final, u=zeros, v=v, p=zeros, phi=phi_final, speed=zeros)
    return Trajectory(
        grid=grid,
        params=PhysicalParams(Ra=0.0, h0=H0),
        dt=duration,
        w_wall=np.full(grid.nx, w),
        checkpoints=[start, end],
    )


@pytest.fixture
def square():
    return Grid(nx=32, ny=32, aspect_ratio=1.0)


@pytest.fixture
def square_geometry(square):
    _, Y = square.mesh()
    return build_geometry(LevelSetField(square, H0 - Y))


def _random_velocity(grid, seed, scale=0.1):
    rng = np.random.default_rng(seed)
    u = scale * rng.standard_normal(grid.shape)
    v = scale * rng.standard_normal((grid.nx, grid.ny + 1))
    v[:, 0] = v[:, -1] = 0.0
    return u, v


def test_cost_terms(grid, flat_front):
    T_d = np.zeros(grid.shape)
    traj = _trajectory(grid, T_d + 1.0, flat_front.phi)
    desired = DesiredState(grid, T_d, flat_front.phi.copy())
    terms = cost_terms(traj, desired, traj.w_wall, CostWeights(beta1=2.0, beta2=1.0, beta3=1e-3))
    assert terms["temperature"] == pytest.approx(0.5 * 2.0 * grid.nx * grid.ny * grid.delta ** 2)
    assert terms["front"] == pytest.approx(0.0, abs=1e-14)
    assert terms["control"] == pytest.approx(0.5 * 1e-3 * 0.1 * grid.nx * 0.25 * grid.delta)


def test_front_term_of_shifted_target(grid, flat_front):
    traj = _trajectory(grid, np.zeros(grid.shape), flat_front.phi)
    desired = DesiredState(grid, np.zeros(grid.shape), flat_front.phi - 0.1)
    weights = CostWeights(beta1=1.0, beta2=1.0, beta3=1e-3)
    terms = cost_terms(traj, desired, traj.w_wall, weights)
    assert terms["front"] == pytest.approx(0.5 * 0.01 * grid.width)
    assert evaluate_cost(traj, desired, traj.w_wall, weights) == pytest.approx(sum(terms.values()))


def test_cost_rejects_other_grid(grid, flat_front):
    traj = _trajectory(grid, np.zeros(grid.shape), flat_front.phi)
    other = Grid(nx=16, ny=32, aspect_ratio=0.5)
    desired = DesiredState(other, np.zeros(other.shape), np.zeros(other.shape))
    with pytest.raises(GridMismatchError):
        cost_terms(traj, desired, traj.w_wall, CostWeights())


def test_terminal_temperature_adjoint(grid, flat_front, flat_geometry):
    rng = np.random.default_rng(0)
    T_f = rng.standard_normal(grid.shape)
    T_d = rng.standard_normal(grid.shape)
    traj = _trajectory(grid, T_f, flat_front.phi)
    adj = terminal_conditions(traj, DesiredState(grid, T_d, flat_front.phi.copy()), CostWeights(beta1=3.0, beta2=0.0))
    off = ~flat_geometry.cut
    np.testing.assert_allclose(adj.Theta[off], 3.0 * (T_f - T_d)[off])
    np.testing.assert_array_equal(adj.psi, 0.0)
    np.testing.assert_array_equal(adj.Theta[flat_geometry.cut], 0.0)
    assert adj.t == pytest.approx(0.1)


def test_terminal_psi_from_front_mismatch(grid, flat_front, flat_geometry):
    _, Y = grid.mesh()
    phi_d = 0.5 * (H0 + 0.1 - Y)
    traj = _trajectory(grid, np.zeros(grid.shape), flat_front.phi)
    desired = DesiredState(grid, np.zeros(grid.shape), phi_d)
    weights = CostWeights(beta1=1.0, beta2=1.0)
    adj = terminal_conditions(traj, desired, weights, AdjointOptions(psi_terminal="difference"))
    cut = flat_geometry.cut
    # D = -0.05 and dD/dn = 0.5 on the front
    np.testing.assert_allclose(adj.psi[cut], 0.025, atol=1e-10)
    np.testing.assert_allclose(adj.Theta[cut], 0.025, atol=1e-10)

    shown = terminal_conditions(traj, desired, weights, AdjointOptions(psi_terminal="displayed"))
    np.testing.assert_allclose(shown.psi, 0.0, atol=1e-12)


def test_adjoint_options_are_validated():
    with pytest.raises(DomainError):
        AdjointOptions(psi_terminal="average")
    with pytest.raises(DomainError):
        AdjointOptions(walls="adiabatic")
    assert AdjointOptions(walls="insulated").insulated


def test_liquid_step_transpose(square, square_geometry):
    """<Theta_new, dT> equals <Theta, dT'> for the linearized liquid step."""
    geom = square_geometry
    params = PhysicalParams(Ra=0.0, h0=H0)
    dt = 1e-3
    u, v = _random_velocity(square, 11)
    rng = np.random.default_rng(12)
    T = rng.standard_normal(square.shape)
    dT = rng.standard_normal(square.shape)
    Theta = rng.standard_normal(square.shape)
    p = np.zeros(square.shape)

    base = step_liquid_temp(FlowState(u=u, v=v, p=p, T=T), geom, params, dt, top=-0.5)
    moved = step_liquid_temp(FlowState(u=u, v=v, p=p, T=T + dT), geom, params, dt, top=-0.5)
    adj = AdjointState(Theta=Theta, psi=np.zeros(square.shape), interface_theta=np.zeros(square.shape), t=0.0)
    Theta_new, _ = step_adjoint_liquid(adj, u, v, geom, dt)
    assert np.sum(Theta_new * dT) == pytest.approx(np.sum(Theta * (moved - base)), rel=1e-9)


def test_solid_step_transpose_and_wall_sensitivity(square, square_geometry):
    geom = square_geometry
    params = PhysicalParams(Ra=0.0, h0=H0)
    dt = 1e-3
    rng = np.random.default_rng(21)
    state = FlowState.at_rest(square, T=rng.standard_normal(square.shape))
    dT = rng.standard_normal(square.shape)
    dw = 0.1 * rng.standard_normal(square.nx)
    Theta = rng.standard_normal(square.shape)
    w = np.full(square.nx, -0.5)

    base = step_solid_heat(state, geom, w, params, dt)
    bumped = step_solid_heat(FlowState.at_rest(square, T=state.T + dT), geom, w, params, dt)
    wall_moved = step_solid_heat(state, geom, w + dw, params, dt)

    adj = AdjointState(Theta=Theta, psi=np.zeros(square.shape), interface_theta=np.zeros(square.shape), t=0.0)
    mu, wall_theta = step_adjoint_solid(adj, geom, dt)
    assert np.sum(mu * dT) == pytest.approx(np.sum(Theta * (bumped - base)), rel=1e-9)
    d = square.delta
    assert d ** 2 * np.sum(Theta * (wall_moved - base)) == pytest.approx(dt * d * np.sum(wall_theta * dw), rel=1e-9)


def test_insulated_constant_adjoint_is_preserved(square, square_geometry):
    geom = square_geometry
    c = 0.7
    u, v = _random_velocity(square, 5)
    full = np.full(square.shape, c)
    adj = AdjointState(Theta=full.copy(), psi=full.copy(), interface_theta=full.copy(), t=0.0)
    mu, wall_solid = step_adjoint_solid(adj, geom, 1e-3, insulated=True)
    np.testing.assert_allclose(mu, c, atol=1e-10)
    np.testing.assert_allclose(wall_solid, c, atol=1e-10)
    adj.Theta = mu
    Theta, wall_liquid = step_adjoint_liquid(adj, u, v, geom, 1e-3, insulated=True)
    np.testing.assert_allclose(Theta, c, atol=1e-10)
    np.testing.assert_array_equal(wall_liquid, 0.0)


def test_assemble_gradient_without_multipliers():
    w = np.array([-0.5, -0.25])
    grad = assemble_gradient(np.zeros((10, 2)), w, CostWeights(beta3=1e-2), dt=1e-3, delta=0.125)
    np.testing.assert_allclose(grad, 1e-3 * 0.125 * 1e-2 * 10 * w)


def test_pure_control_penalty_gradient(grid, conduction, flat_front):
    traj = run_forward(-0.5, conduction, grid, t_f=0.005, dt=1e-3)
    desired = DesiredState(grid, np.zeros(grid.shape), flat_front.phi.copy())
    weights = CostWeights(beta1=0.0, beta2=0.0, beta3=1e-2)
    result = run_adjoint(traj, desired, weights)
    assert result.wall_theta.shape == (5, grid.nx)
    np.testing.assert_allclose(result.wall_theta, 0.0, atol=1e-14)
    expected = weights.beta3 * traj.duration * grid.delta * traj.w_wall
    np.testing.assert_allclose(result.grad_w, expected, rtol=1e-12)


@pytest.mark.slow
def test_adjoint_matches_finite_differences():
    grid = Grid(nx=16, ny=16, aspect_ratio=1.0)
    params = PhysicalParams(Ra=0.0, St=1.0, T_b=0.7, T_M=0.0, h0=H0)
    basis = Basis("tanh_basis")
    target = run_forward(basis.wall([0.3, 2.0], grid), params, grid, t_f=0.02, dt=1e-3)
    desired = DesiredState(grid, target.final.T.copy(), target.final.phi.copy())
    problem = ControlProblem(
        params=params, grid=grid, t_f=0.02, dt=1e-3, basis=basis,
        desired=desired, weights=CostWeights(beta1=1.0, beta2=1.0, beta3=1e-3),
    )
    a = np.array([0.4, 0.8])
    problem.cost(a)
    adjoint = problem.gradient(a)
    fd = fd_gradient(problem, a, step=1e-5)
    assert cosine_similarity(adjoint, fd) > 0.99
    np.testing.assert_allclose(adjoint, fd, rtol=1e-2)
