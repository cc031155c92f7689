"""Cost functional and the reverse-time adjoint sweep over a stored trajectory.

The temperature adjoint is the transpose of the discrete forward heat steps with
the velocity frozen from the checkpoints; no Navier-Stokes adjoint is solved.
The front enters through an adjoint level-set scalar psi whose value
psi*|grad phi| is imposed as Dirichlet data for Theta on the interface.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from tqdm import tqdm

from Models.state import (
    AdjointState,
    Checkpoint,
    CostWeights,
    DesiredState,
    ExtensionSettings,
    FlowState,
    LevelSetField,
    PhaseGeometry,
    StefanSpeed,
    Trajectory,
)
from Services.compute import build_geometry, central_gradient, compute_curvature, interpolate, normal_gradients
from Services.errors import DomainError, GridMismatchError, SolverError, StepError
from Services.forward import advection_matrix, phase_operator, solve_sparse, stefan_speed
from Services.levelset import extend_velocity

logger = logging.getLogger(__name__)

PSI_TERMINAL_MODES = ("displayed", "difference")
WALL_CLOSURES = ("transpose", "insulated")


@dataclass(frozen=True)
class AdjointOptions:
    psi_terminal: str = "displayed"
    walls: str = "transpose"
    extension: ExtensionSettings = ExtensionSettings()
    progress: bool = False

    def __post_init__(self):
        if self.psi_terminal not in PSI_TERMINAL_MODES:
            raise DomainError(f"psi_terminal must be one of {PSI_TERMINAL_MODES}, got {self.psi_terminal!r}")
        if self.walls not in WALL_CLOSURES:
            raise DomainError(f"walls must be one of {WALL_CLOSURES}, got {self.walls!r}")

    @property
    def insulated(self) -> bool:
        return self.walls == "insulated"


@dataclass
class AdjointResult:
    state: AdjointState
    wall_theta: np.ndarray
    grad_w: np.ndarray
    dt: float


def _check_grids(traj: Trajectory, desired: DesiredState):
    if desired.grid != traj.grid:
        raise GridMismatchError(f"desired state grid {desired.grid} differs from trajectory grid {traj.grid}")


def cost_terms(
    traj: Trajectory,
    desired: DesiredState,
    w_wall: np.ndarray,
    weights: CostWeights,
) -> Dict[str, float]:
    """Temperature tracking, front tracking and control penalty parts of J."""
    _check_grids(traj, desired)
    grid = traj.grid
    d = grid.delta
    final = traj.final
    w = np.broadcast_to(np.asarray(w_wall, dtype=float), (grid.nx,))

    temperature = 0.5 * weights.beta1 * float(np.sum((final.T - desired.T_d) ** 2) * d ** 2)
    front = 0.0
    if weights.beta2 > 0:
        geom = build_geometry(LevelSetField(grid, final.phi))
        if geom.n_segments:
            mismatch = interpolate(final.phi - desired.phi_d, geom.seg_mid, grid)
            front = 0.5 * weights.beta2 * float(np.sum(mismatch ** 2 * geom.seg_length))
    control = 0.5 * weights.beta3 * traj.duration * float(np.sum(w ** 2) * d)
    return {"temperature": temperature, "front": front, "control": control}


def evaluate_cost(traj: Trajectory, desired: DesiredState, w_wall: np.ndarray, weights: CostWeights) -> float:
    return float(sum(cost_terms(traj, desired, w_wall, weights).values()))


def _extend_cut_values(ls: LevelSetField, geom: PhaseGeometry, values: np.ndarray, settings: ExtensionSettings) -> np.ndarray:
    field = np.zeros(geom.grid.shape)
    cells = geom.cut_cells
    field[cells[:, 0], cells[:, 1]] = values
    carrier = StefanSpeed(
        values=field,
        mask=geom.cut,
        flagged=np.zeros(geom.grid.shape, dtype=bool),
        grad_liquid=np.zeros(geom.grid.shape),
        grad_solid=np.zeros(geom.grid.shape),
    )
    return extend_velocity(ls, carrier, settings, normals=geom.normals)


def terminal_conditions(
    traj: Trajectory,
    desired: DesiredState,
    weights: CostWeights,
    options: Optional[AdjointOptions] = None,
) -> AdjointState:
    """Theta = beta1 (T^f - T^d) off the front; psi from the squared front mismatch, extended along normals.

    psi^f = -(beta2/2) (d/dn D^2 + kappa D^2) at the segment midpoints of the final
    front, with D = phi^f ("displayed") or D = phi^f - phi^d ("difference").
    """
    opts = options or AdjointOptions()
    _check_grids(traj, desired)
    grid = traj.grid
    final = traj.final
    ls = LevelSetField(grid, final.phi)
    geom = build_geometry(ls)

    Theta = weights.beta1 * (final.T - desired.T_d)
    psi = np.zeros(grid.shape)
    if weights.beta2 > 0 and geom.n_segments:
        D = final.phi if opts.psi_terminal == "displayed" else final.phi - desired.phi_d
        gx, gy = central_gradient(D, grid.delta)
        kappa, _ = compute_curvature(ls)
        mid = geom.seg_mid
        D_mid = interpolate(D, mid, grid)
        dn = interpolate(gx, mid, grid) * geom.seg_normal[:, 0] + interpolate(gy, mid, grid) * geom.seg_normal[:, 1]
        k_mid = interpolate(kappa, mid, grid)
        on_front = -0.5 * weights.beta2 * (2.0 * D_mid * dn + k_mid * D_mid ** 2)
        psi = _extend_cut_values(ls, geom, on_front, opts.extension)
    interface_theta = psi * geom.normals.grad_norm
    Theta[geom.cut] = interface_theta[geom.cut]
    return AdjointState(Theta=Theta, psi=psi, interface_theta=interface_theta, t=final.time)


def step_adjoint_solid(
    adj: AdjointState,
    geom: PhaseGeometry,
    dt: float,
    insulated: bool = False,
) -> Tuple[np.ndarray, np.ndarray]:
    """Reverse backward-Euler heat step on the solid; returns (Theta, top-wall Theta)."""
    grid = geom.grid
    op = phase_operator(geom, ~geom.liquid, adj.interface_theta, 0.0, insulated_walls=insulated)
    rhs = adj.Theta.ravel() + dt * op.source
    mu = solve_sparse(op.helmholtz(dt), rhs, "adjoint solid").reshape(grid.shape)
    return mu, _wall_theta(op.top_weight, mu, geom.solid, grid.delta, insulated)


def step_adjoint_liquid(
    adj: AdjointState,
    u: np.ndarray,
    v: np.ndarray,
    geom: PhaseGeometry,
    dt: float,
    insulated: bool = False,
) -> Tuple[np.ndarray, np.ndarray]:
    """Reverse advection-diffusion step on the liquid with u frozen from the forward run."""
    grid = geom.grid
    op = phase_operator(geom, geom.liquid, adj.interface_theta, 0.0, insulated_walls=insulated)
    rhs = adj.Theta.ravel() + dt * op.source
    mu = solve_sparse(op.helmholtz(dt), rhs, "adjoint liquid")
    C = advection_matrix(u, v, geom)
    Theta = (mu + dt * (C.T @ mu)).reshape(grid.shape)
    return Theta, _wall_theta(op.top_weight, mu.reshape(grid.shape), geom.liquid, grid.delta, insulated)


def _wall_theta(top_weight, mu, phase, delta, insulated) -> np.ndarray:
    # multiplier of the top-wall Dirichlet data, per column
    if insulated:
        return np.where(phase[:, -1], mu[:, -1], 0.0)
    return top_weight * mu[:, -1] * delta


def psi_flux_divergence(psi: np.ndarray, Wx: np.ndarray, Wy: np.ndarray, delta: float) -> np.ndarray:
    """Conservative upwind div(psi W), periodic in x and zero flux through the walls."""
    wx = 0.5 * (np.roll(Wx, 1, axis=0) + Wx)
    flux_x = wx * np.where(wx > 0, np.roll(psi, 1, axis=0), psi)
    nx, ny = psi.shape
    flux_y = np.zeros((nx, ny + 1))
    wy = 0.5 * (Wy[:, :-1] + Wy[:, 1:])
    flux_y[:, 1:-1] = wy * np.where(wy > 0, psi[:, :-1], psi[:, 1:])
    return (np.roll(flux_x, -1, axis=0) - flux_x + flux_y[:, 1:] - flux_y[:, :-1]) / delta


def adjoint_front_source(
    adj: AdjointState,
    ls: LevelSetField,
    geom: PhaseGeometry,
    T_state: FlowState,
    traj: Trajectory,
    options: AdjointOptions,
) -> np.ndarray:
    """St/|grad phi| * dT/dn * (dTheta_S/dn - dTheta_L/dn) on the cut cells, extended along normals."""
    if geom.n_segments == 0:
        return np.zeros(geom.grid.shape)
    params = traj.params
    speed = stefan_speed(T_state, geom, params, traj.w_wall)
    cells = geom.cut_cells
    ci, cj = cells[:, 0], cells[:, 1]
    dT_dn = 0.5 * (speed.grad_liquid[ci, cj] + speed.grad_solid[ci, cj])

    Theta = adj.Theta
    if options.insulated:
        bottom, top = Theta[:, 0], Theta[:, -1]
    else:
        bottom, top = 0.0, 0.0
    on_front = adj.interface_theta[ci, cj]
    g_l, _ = normal_gradients(Theta, geom, on_front, "liquid", bottom, top)
    g_s, _ = normal_gradients(Theta, geom, on_front, "solid", bottom, top)

    grad_norm = np.maximum(geom.normals.grad_norm[ci, cj], 1e-8)
    values = params.St * dT_dn * (g_s - g_l) / grad_norm
    return _extend_cut_values(ls, geom, values, options.extension)


def step_adjoint_levelset(
    adj: AdjointState,
    geom: PhaseGeometry,
    speed: np.ndarray,
    source: np.ndarray,
    dt: float,
) -> np.ndarray:
    """Explicit reverse step of psi_t + div(psi V) = source, V = -F n the front velocity."""
    n = geom.normals
    div = psi_flux_divergence(adj.psi, speed * n.nx, speed * n.ny, geom.grid.delta)
    return adj.psi - dt * div - dt * source


def step_adjoint(
    adj: AdjointState,
    before: Checkpoint,
    after: Checkpoint,
    traj: Trajectory,
    options: AdjointOptions,
) -> Tuple[AdjointState, np.ndarray]:
    """Undo forward step before -> after: front first, then solid, then liquid."""
    grid = traj.grid
    dt = traj.dt
    ls = LevelSetField(grid, before.phi)
    geom = build_geometry(ls)
    speed = after.speed if after.speed is not None else np.zeros(grid.shape)

    T_state = FlowState(u=after.u, v=after.v, p=after.p, T=after.T, t=after.time)
    source = adjoint_front_source(adj, ls, geom, T_state, traj, options)
    psi = step_adjoint_levelset(adj, geom, speed, source, dt)
    interface_theta = psi * geom.normals.grad_norm

    current = AdjointState(Theta=adj.Theta, psi=psi, interface_theta=interface_theta, t=adj.t)
    current.Theta, wall_solid = step_adjoint_solid(current, geom, dt, options.insulated)
    current.Theta, wall_liquid = step_adjoint_liquid(current, after.u, after.v, geom, dt, options.insulated)
    current.t = before.time
    return current, wall_solid + wall_liquid


def assemble_gradient(
    wall_theta: np.ndarray, w_wall: np.ndarray, weights: CostWeights, dt: float, delta: float
) -> np.ndarray:
    """dJ/dw per column: control penalty plus the time sum of the top-wall multipliers."""
    n_steps = wall_theta.shape[0]
    return dt * delta * (weights.beta3 * n_steps * np.asarray(w_wall, dtype=float) + wall_theta.sum(axis=0))


def run_adjoint(
    traj: Trajectory,
    desired: DesiredState,
    weights: CostWeights,
    options: Optional[AdjointOptions] = None,
) -> AdjointResult:
    """Reverse sweep t_f -> t_0; collects the top-wall Theta of every step and dJ/dw per column."""
    opts = options or AdjointOptions()
    grid = traj.grid
    n_steps = traj.n_steps
    adj = terminal_conditions(traj, desired, weights, opts)
    wall_theta = np.zeros((n_steps, grid.nx))

    after = traj.checkpoints[n_steps]
    for k in tqdm(range(n_steps - 1, -1, -1), desc="adjoint", disable=not opts.progress, leave=False):
        before = traj.checkpoints[k]
        try:
            adj, wall_theta[k] = step_adjoint(adj, before, after, traj, opts)
        except SolverError as exc:
            raise StepError(k, after.time, exc, reverse=True) from exc
        after = before

    grad_w = assemble_gradient(wall_theta, traj.w_wall, weights, traj.dt, grid.delta)
    logger.debug("adjoint sweep done: |dJ/dw| = %.3e", float(np.linalg.norm(grad_w)))
    return AdjointResult(state=adj, wall_theta=wall_theta, grad_w=grad_w, dt=traj.dt)
