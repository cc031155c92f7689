"""Forward melting problem: conduction in the solid, Boussinesq flow and heat
transport in the melt, the Stefan condition and level-set motion of the front.

Temperatures live at cell centres of both phases in one array. Velocities sit on
a staggered (MAC) grid: u[i, j] on the x-face at x = i*delta, v[i, j] on the
y-face at y = j*delta (v[:, 0] and v[:, ny] are the walls).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
from scipy.optimize import bisect
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import spsolve
from scipy.special import erf, erfc
from tqdm import tqdm

from Models.state import (
    Checkpoint,
    ExtensionSettings,
    FlowState,
    Grid,
    LevelSetField,
    PhaseGeometry,
    PhysicalParams,
    StefanSpeed,
    Trajectory,
)
from Services.checkpoint import CheckpointStore
from Services.compute import build_geometry, normal_gradients
from Services.errors import CFLError, DomainError, GridMismatchError, LinearSolveError, SolverError, StepError
from Services.levelset import (
    RA_CRITICAL,
    advect_levelset,
    column_heights,
    effective_rayleigh,
    extend_velocity,
    init_flat_interface,
    reinitialize,
)

logger = logging.getLogger(__name__)

THETA_MIN = 1e-3
LINK_WEIGHT_MIN = 1e-6
_DIRECTIONS = ((1, 0), (-1, 0), (0, 1), (0, -1))

WallData = Union[float, np.ndarray]


@dataclass(frozen=True)
class ForwardOptions:
    extension: ExtensionSettings = ExtensionSettings()
    reinit_every: int = 5
    checkpoint_budget_mb: float = 512.0
    spill_dir: Optional[Path] = None
    stop_height: float = 0.95
    perturbation: float = 0.0
    seed: int = 0
    progress: bool = False


def wall_array(w: WallData, grid: Grid, params: Optional[PhysicalParams] = None) -> np.ndarray:
    """Top-wall temperature per column; checks w < T_M when params are given."""
    try:
        arr = np.broadcast_to(np.asarray(w, dtype=float), (grid.nx,)).copy()
    except ValueError as exc:
        raise GridMismatchError(f"wall data of shape {np.shape(w)} does not fit {grid.nx} columns") from exc
    if not np.all(np.isfinite(arr)):
        raise DomainError("wall temperature must be finite")
    if params is not None and np.any(arr >= params.T_M):
        raise DomainError(f"wall temperature must stay below T_M = {params.T_M}, max is {arr.max():.4g}")
    return arr


def solve_sparse(M: sp.spmatrix, rhs: np.ndarray, what: str) -> np.ndarray:
    x = spsolve(M.tocsc(), rhs)
    x = np.atleast_1d(x)
    if not np.all(np.isfinite(x)):
        raise LinearSolveError(f"{what} system is singular")
    residual = float(np.abs(M @ x - rhs).max(initial=0.0))
    norm = float(abs(M).sum(axis=1).max()) if M.shape[0] else 0.0
    scale = max(1.0, float(np.abs(rhs).max(initial=0.0)), norm * float(np.abs(x).max(initial=0.0)))
    if residual > 1e-10 * scale:
        raise LinearSolveError(f"{what} solve did not converge", residual)
    return x


def _shift(a: np.ndarray, di: int, dj: int, fill) -> np.ndarray:
    # a[i+di, j+dj], periodic in x, `fill` past the walls
    if di:
        return np.roll(a, -di, axis=0)
    out = np.full_like(a, fill)
    if dj > 0:
        out[:, :-1] = a[:, 1:]
    else:
        out[:, 1:] = a[:, :-1]
    return out


@dataclass
class PhaseOperator:
    """Laplacian of one phase with its Dirichlet data folded into a source.

    Rows of cells outside the phase are empty, so I - dt*L leaves them untouched.
    """

    mask: np.ndarray
    laplacian: sp.csr_matrix
    source: np.ndarray
    top_weight: np.ndarray

    def wall_source(self, top: WallData) -> np.ndarray:
        out = np.zeros(self.mask.shape)
        out[:, -1] = self.top_weight * top
        return out.ravel()

    def helmholtz(self, dt: float) -> sp.csr_matrix:
        n = self.laplacian.shape[0]
        return (sp.identity(n, format="csr") - dt * self.laplacian).tocsr()


def interface_fractions(geom: PhaseGeometry, di: int, dj: int) -> np.ndarray:
    """Distance to the front along the link to neighbour (di, dj), in units of delta.

    Defined where the neighbour lies in the other phase, 1 elsewhere; floored at THETA_MIN.
    """
    phi = geom.phi
    q_phi = _shift(phi, di, dj, np.nan)
    with np.errstate(divide="ignore", invalid="ignore"):
        theta = np.clip(phi / (phi - q_phi), THETA_MIN, 1.0)
    return np.where(np.isfinite(theta), theta, 1.0)


def phase_operator(
    geom: PhaseGeometry,
    mask: np.ndarray,
    interface_value: WallData = 0.0,
    bottom: WallData = 0.0,
    insulated_walls: bool = False,
) -> PhaseOperator:
    """Five-point Laplacian on `mask` with ghost-fluid Dirichlet data on the front.

    A link p->q that crosses the front is shortened to theta*delta and carries the
    interface value, either a scalar or a cell field interpolated along the link.
    The bottom wall carries `bottom`; the top wall enters through `top_weight`.
    With insulated_walls both walls are zero-flux instead.
    """
    grid = geom.grid
    nx, ny = grid.shape
    inv = 1.0 / grid.delta ** 2
    idx = np.arange(nx * ny).reshape(nx, ny)
    values = np.asarray(interface_value, dtype=float)
    per_cell = values.ndim == 2
    if per_cell:
        grid.check_shape(values, "interface values")
        values = np.nan_to_num(values)
    bottom_rows = np.broadcast_to(np.asarray(bottom, dtype=float)[..., None], (nx, ny))

    diag = np.zeros((nx, ny))
    source = np.zeros((nx, ny))
    rows, cols = [], []
    for di, dj in _DIRECTIONS:
        exists = _shift(np.ones((nx, ny), dtype=bool), di, dj, False)
        q_mask = _shift(mask, di, dj, False)
        same = mask & exists & q_mask
        cross = mask & exists & ~q_mask
        wall = mask & ~exists

        rows.append(idx[same])
        cols.append(_shift(idx, di, dj, 0)[same])
        diag[same] -= inv

        if cross.any():
            theta = interface_fractions(geom, di, dj)
            if per_cell:
                link = (1.0 - theta) * values + theta * _shift(values, di, dj, 0.0)
            else:
                link = np.broadcast_to(values, (nx, ny))
            diag[cross] -= inv / theta[cross]
            source[cross] += link[cross] * inv / theta[cross]

        if wall.any() and not insulated_walls:
            diag[wall] -= 2.0 * inv
            if dj < 0:
                source[wall] += 2.0 * inv * bottom_rows[wall]

    n = nx * ny
    off = np.concatenate(rows)
    L = sp.coo_matrix(
        (
            np.concatenate([np.full(off.size, inv), diag.ravel()]),
            (np.concatenate([off, idx.ravel()]), np.concatenate([np.concatenate(cols), idx.ravel()])),
        ),
        shape=(n, n),
    ).tocsr()
    top_weight = np.where(mask[:, -1] & (not insulated_walls), 2.0 * inv, 0.0)
    return PhaseOperator(mask=mask, laplacian=L, source=source.ravel(), top_weight=top_weight)


def fluid_faces(geom: PhaseGeometry) -> Tuple[np.ndarray, np.ndarray]:
    """Faces with liquid on both sides: (x-faces (nx, ny), y-faces (nx, ny+1))."""
    liq = geom.liquid
    nx, ny = geom.grid.shape
    fu = liq & np.roll(liq, 1, axis=0)
    fv = np.zeros((nx, ny + 1), dtype=bool)
    fv[:, 1:-1] = liq[:, :-1] & liq[:, 1:]
    return fu, fv


def advection_matrix(u: np.ndarray, v: np.ndarray, geom: PhaseGeometry) -> sp.csr_matrix:
    """First-order upwind flux form, (C T)_p = -div(u T)_p over fluid faces."""
    grid = geom.grid
    nx, ny = grid.shape
    d = grid.delta
    idx = np.arange(nx * ny).reshape(nx, ny)
    fu, fv = fluid_faces(geom)

    sel_u = fu & (u != 0)
    sel_v = fv[:, 1:-1] & (v[:, 1:-1] != 0)
    left = np.concatenate([np.roll(idx, 1, axis=0)[sel_u], idx[:, :-1][sel_v]])
    right = np.concatenate([idx[sel_u], idx[:, 1:][sel_v]])
    vel = np.concatenate([u[sel_u], v[:, 1:-1][sel_v]]) / d

    up = np.where(vel > 0, left, right)
    n = nx * ny
    return sp.coo_matrix(
        (np.concatenate([vel, -vel]), (np.concatenate([right, left]), np.concatenate([up, up]))),
        shape=(n, n),
    ).tocsr()


def step_liquid_temp(
    state: FlowState,
    geom: PhaseGeometry,
    params: PhysicalParams,
    dt: float,
    top: Optional[WallData] = None,
) -> np.ndarray:
    """Explicit upwind advection plus backward-Euler diffusion on the liquid cells."""
    grid = geom.grid
    grid.check_shape(state.T, "T")
    op = phase_operator(geom, geom.liquid, params.T_M, params.T_b)
    C = advection_matrix(state.u, state.v, geom)
    T = state.T.ravel()
    top_value = params.T_M if top is None else top
    rhs = T + dt * (C @ T) + dt * (op.source + op.wall_source(top_value))
    return solve_sparse(op.helmholtz(dt), rhs, "liquid temperature").reshape(grid.shape)


def step_solid_heat(
    state: FlowState,
    geom: PhaseGeometry,
    w_wall: WallData,
    params: PhysicalParams,
    dt: float,
) -> np.ndarray:
    grid = geom.grid
    grid.check_shape(state.T, "T")
    op = phase_operator(geom, ~geom.liquid, params.T_M, params.T_b)
    rhs = state.T.ravel() + dt * (op.source + op.wall_source(w_wall))
    return solve_sparse(op.helmholtz(dt), rhs, "solid temperature").reshape(grid.shape)


def divergence(u: np.ndarray, v: np.ndarray, grid: Grid) -> np.ndarray:
    return (np.roll(u, -1, axis=0) - u + v[:, 1:] - v[:, :-1]) / grid.delta


def vorticity(u: np.ndarray, v: np.ndarray, grid: Grid) -> np.ndarray:
    """dv/dx - du/dy at cell centres."""
    d = grid.delta
    uc = 0.5 * (u + np.roll(u, -1, axis=0))
    vc = 0.5 * (v[:, :-1] + v[:, 1:])
    dvdx = (np.roll(vc, -1, axis=0) - np.roll(vc, 1, axis=0)) / (2 * d)
    dudy = np.gradient(uc, d, axis=1) if grid.ny > 1 else np.zeros_like(uc)
    return dvdx - dudy


def _momentum_advection(u: np.ndarray, v: np.ndarray, d: float) -> Tuple[np.ndarray, np.ndarray]:
    # x-faces: no-slip ghosts -u beyond the walls
    u_w = np.roll(u, 1, axis=0)
    u_e = np.roll(u, -1, axis=0)
    u_s = np.concatenate([-u[:, :1], u[:, :-1]], axis=1)
    u_n = np.concatenate([u[:, 1:], -u[:, -1:]], axis=1)
    v_at_u = 0.25 * (v[:, :-1] + v[:, 1:] + np.roll(v[:, :-1], 1, axis=0) + np.roll(v[:, 1:], 1, axis=0))
    dudx = np.where(u > 0, u - u_w, u_e - u) / d
    dudy = np.where(v_at_u > 0, u - u_s, u_n - u) / d
    adv_u = u * dudx + v_at_u * dudy

    adv_v = np.zeros_like(v)
    if v.shape[1] > 2:
        vi = v[:, 1:-1]
        u_at_v = 0.25 * (u[:, :-1] + u[:, 1:] + np.roll(u[:, :-1], -1, axis=0) + np.roll(u[:, 1:], -1, axis=0))
        dvdx = np.where(u_at_v > 0, vi - np.roll(vi, 1, axis=0), np.roll(vi, -1, axis=0) - vi) / d
        dvdy = np.where(vi > 0, vi - v[:, :-2], v[:, 2:] - vi) / d
        adv_v[:, 1:-1] = u_at_v * dvdx + vi * dvdy
    return adv_u, adv_v


def _viscous_solve(
    fluid: np.ndarray,
    rhs: np.ndarray,
    outside: np.ndarray,
    k: float,
    wall_ghost: bool,
) -> np.ndarray:
    """Solve (I - k*Lap) q = rhs on the fluid faces of one velocity component.

    Non-fluid neighbours hold the Dirichlet values in `outside`. With `wall_ghost`
    the rows next to the walls see a mirrored ghost -q (no slip half a cell away).
    """
    out = np.zeros_like(rhs)
    nf = int(fluid.sum())
    if nf == 0:
        return out
    nxf, m = fluid.shape
    index = -np.ones(fluid.shape, dtype=int)
    index[fluid] = np.arange(nf)
    I, J = np.nonzero(fluid)

    diag = np.ones(nf)
    extra = np.zeros(nf)
    rows, cols = [], []
    for di, dj in _DIRECTIONS:
        I2 = (I + di) % nxf
        J2 = J + dj
        inside = (J2 >= 0) & (J2 < m)
        J2c = np.clip(J2, 0, m - 1)
        nb = inside & fluid[I2, J2c]
        dirichlet = inside & ~nb
        diag += np.where(inside, k, 2.0 * k if wall_ghost else k)
        rows.append(np.flatnonzero(nb))
        cols.append(index[I2[nb], J2c[nb]])
        extra[dirichlet] += k * outside[I2[dirichlet], J2c[dirichlet]]

    r = np.concatenate(rows)
    A = sp.coo_matrix(
        (np.concatenate([np.full(r.size, -k), diag]), (np.concatenate([r, np.arange(nf)]), np.concatenate(cols + [np.arange(nf)]))),
        shape=(nf, nf),
    ).tocsr()
    out[fluid] = solve_sparse(A, rhs[fluid] + extra, "momentum")
    return out


def project(
    u_star: np.ndarray,
    v_star: np.ndarray,
    geom: PhaseGeometry,
    scale: float,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Remove the discrete divergence of (u*, v*) on the liquid cells.

    Solves Lap(q) = div(u*) / scale with zero flux through non-fluid faces, one
    pinned cell per connected liquid region, and returns (u, v, q).
    """
    grid = geom.grid
    d = grid.delta
    liq = geom.liquid
    fu, fv = fluid_faces(geom)
    u = np.where(fu, u_star, 0.0)
    v = np.where(fv, v_star, 0.0)
    q = np.zeros(grid.shape)
    nl = int(liq.sum())
    if nl == 0:
        return u, v, q

    cidx = -np.ones(grid.shape, dtype=int)
    cidx[liq] = np.arange(nl)
    fvi = fv[:, 1:-1]
    a = np.concatenate([np.roll(cidx, 1, axis=0)[fu], cidx[:, :-1][fvi]])
    b = np.concatenate([cidx[fu], cidx[:, 1:][fvi]])
    m = a.size
    inv = 1.0 / d ** 2
    A = sp.coo_matrix(
        (
            np.concatenate([np.full(2 * m, inv), np.full(2 * m, -inv)]),
            (np.concatenate([a, b, a, b]), np.concatenate([b, a, a, b])),
        ),
        shape=(nl, nl),
    ).tocsr()

    div_star = divergence(u, v, grid)[liq]
    rhs = div_star / scale
    _, labels = connected_components(sp.coo_matrix((np.ones(m), (a, b)), shape=(nl, nl)), directed=False)
    pins = np.unique(labels, return_index=True)[1]
    keep = np.ones(nl)
    keep[pins] = 0.0
    A = (sp.diags(keep) @ A + sp.diags(1.0 - keep)).tocsr()
    rhs[pins] = 0.0

    sol = solve_sparse(A, rhs, "pressure Poisson")
    q[liq] = sol
    nu = int(fu.sum())
    u[fu] -= scale * (sol[b[:nu]] - sol[a[:nu]]) / d
    v[:, 1:-1][fvi] -= scale * (sol[b[nu:]] - sol[a[nu:]]) / d

    div_max = float(np.abs(divergence(u, v, grid)[liq]).max())
    if div_max > 1e-8 * max(1.0, float(np.abs(div_star).max())):
        raise LinearSolveError("projection left a divergent velocity field", div_max)
    return u, v, q


def step_liquid_ns(
    state: FlowState,
    geom: PhaseGeometry,
    params: PhysicalParams,
    dt: float,
    wall_velocity: float = 0.0,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One incremental pressure-correction step of the Boussinesq equations.

    Momentum is scaled as u_t + u.grad u = Pr(-grad p + Ra T e_y + Lap u).
    `wall_velocity` sets the x-velocity held by non-fluid faces (0 is no slip).
    """
    grid = geom.grid
    d = grid.delta
    Pr = params.Pr
    u, v, p, T = state.u, state.v, state.p, state.T
    grid.check_shape(v, "v", extra_y=1)
    fu, fv = fluid_faces(geom)

    adv_u, adv_v = _momentum_advection(u, v, d)
    dpdx = (p - np.roll(p, 1, axis=0)) / d
    dpdy = np.zeros_like(v)
    dpdy[:, 1:-1] = (p[:, 1:] - p[:, :-1]) / d
    buoyancy = np.zeros_like(v)
    buoyancy[:, 1:-1] = params.Ra * 0.5 * (T[:, :-1] + T[:, 1:])

    k = dt * Pr / d ** 2
    u_star = _viscous_solve(
        fu, u - dt * adv_u - dt * Pr * dpdx, np.full(u.shape, float(wall_velocity)), k, wall_ghost=True
    )
    v_star = _viscous_solve(
        fv, v - dt * adv_v + dt * Pr * (buoyancy - dpdy), np.zeros(v.shape), k, wall_ghost=False
    )
    u_new, v_new, q = project(u_star, v_star, geom, dt * Pr)
    p_new = np.where(geom.liquid, p + q, 0.0)

    courant = max(np.abs(u_new).max(initial=0.0), np.abs(v_new).max(initial=0.0)) * dt / d
    if courant > 1.0:
        raise CFLError(float(courant), dt)
    return u_new, v_new, p_new


def front_link_gradients(
    T: np.ndarray,
    geom: PhaseGeometry,
    interface_value: float,
    side: str,
) -> Tuple[np.ndarray, np.ndarray]:
    """Normal derivative per segment from the phase operator's front links.

    Every link of `side` that crosses the front gives dT/de = (T_M - T_p)/(theta*delta)
    along its direction e; the links landing in a cut cell are fitted to dT/dn (e.n)
    in the least-squares sense. Returns (gradient per segment, covered per segment);
    segments with no landing link are not covered.
    """
    grid = geom.grid
    nseg = geom.n_segments
    num = np.zeros(nseg)
    den = np.zeros(nseg)
    if nseg == 0:
        return num, den > 0
    mask = geom.liquid if side == "liquid" else ~geom.liquid
    seg_of = np.full(grid.shape, -1)
    seg_of[geom.cut_cells[:, 0], geom.cut_cells[:, 1]] = np.arange(nseg)
    ones = np.ones(grid.shape, dtype=bool)

    for di, dj in _DIRECTIONS:
        cross = mask & _shift(ones, di, dj, False) & ~_shift(mask, di, dj, False)
        if not cross.any():
            continue
        theta = interface_fractions(geom, di, dj)[cross]
        p_seg = seg_of[cross]
        q_seg = _shift(seg_of, di, dj, -1)[cross]
        # the crossing sits in p's cell when it is at most half a link away
        near_p = theta <= 0.5
        seg = np.where(near_p, p_seg, q_seg)
        seg = np.where(seg >= 0, seg, np.where(near_p, q_seg, p_seg))
        keep = seg >= 0
        seg = seg[keep]
        slope = (interface_value - T[cross][keep]) / (theta[keep] * grid.delta)
        e_n = di * geom.seg_normal[seg, 0] + dj * geom.seg_normal[seg, 1]
        np.add.at(num, seg, e_n * slope)
        np.add.at(den, seg, e_n ** 2)

    covered = den > LINK_WEIGHT_MIN
    return np.where(covered, num / np.where(covered, den, 1.0), 0.0), covered


def stefan_speed(
    state: FlowState,
    geom: PhaseGeometry,
    params: PhysicalParams,
    w_wall: WallData,
) -> StefanSpeed:
    """Front speed St*(dT_L/dn - dT_S/dn) on every cut cell, n pointing into the liquid.

    The one-sided derivatives come from the same front links the heat operators use,
    so the latent heat taken up by the moving front matches the heat they withdraw.
    Segments without such a link fall back to the interpolated derivatives of normal_gradients.
    """
    grid = geom.grid
    T = state.T
    g_l, flag_l = normal_gradients(T, geom, params.T_M, "liquid", params.T_b, w_wall)
    g_s, flag_s = normal_gradients(T, geom, params.T_M, "solid", params.T_b, w_wall)
    link_l, cov_l = front_link_gradients(T, geom, params.T_M, "liquid")
    link_s, cov_s = front_link_gradients(T, geom, params.T_M, "solid")
    g_l = np.where(cov_l, link_l, g_l)
    g_s = np.where(cov_s, link_s, g_s)
    cells = geom.cut_cells
    ci, cj = cells[:, 0], cells[:, 1]

    values = np.zeros(grid.shape)
    flagged = np.zeros(grid.shape, dtype=bool)
    grad_liquid = np.zeros(grid.shape)
    grad_solid = np.zeros(grid.shape)
    values[ci, cj] = params.St * (g_l - g_s)
    flagged[ci, cj] = (flag_l & ~cov_l) | (flag_s & ~cov_s)
    grad_liquid[ci, cj] = g_l
    grad_solid[ci, cj] = g_s
    return StefanSpeed(values=values, mask=geom.cut.copy(), flagged=flagged, grad_liquid=grad_liquid, grad_solid=grad_solid)


def forward_step(
    state: FlowState,
    ls: LevelSetField,
    geom: PhaseGeometry,
    w_wall: np.ndarray,
    params: PhysicalParams,
    dt: float,
    options: ForwardOptions,
    step: int,
) -> Tuple[FlowState, LevelSetField, PhaseGeometry, np.ndarray]:
    if params.convective:
        u, v, p = step_liquid_ns(state, geom, params, dt)
    else:
        u, v, p = state.u, state.v, state.p
    moving = FlowState(u=u, v=v, p=p, T=state.T, t=state.t)
    moving.T = step_liquid_temp(moving, geom, params, dt, top=w_wall)
    moving.T = step_solid_heat(moving, geom, w_wall, params, dt)
    moving.t = state.t + dt

    speed = stefan_speed(moving, geom, params, w_wall)
    if speed.flagged.any():
        logger.debug("step %d: %d cut cells used a fallback gradient", step, int(speed.flagged.sum()))
    F = extend_velocity(ls, speed, options.extension, normals=geom.normals)
    new_ls = advect_levelset(ls, F, dt)
    if options.reinit_every and (step + 1) % options.reinit_every == 0:
        new_ls = reinitialize(new_ls, nb_width=options.extension.nb_width)
    return moving, new_ls, build_geometry(new_ls), F


@dataclass
class DiagnosticsTracker:
    grid: Grid
    params: PhysicalParams
    w_wall: np.ndarray
    initial_volume: float

    def row(self, state: FlowState, ls: LevelSetField, geom: PhaseGeometry) -> Dict[str, float]:
        grid = self.grid
        d = grid.delta
        h = column_heights(ls)
        h_bar = float(h.mean())
        volume = geom.liquid_volume()
        bottom_flux = 2.0 * float(np.sum(self.params.T_b - state.T[:, 0]))
        top_flux = 2.0 * float(np.sum(self.w_wall - state.T[:, -1]))
        return {
            "t": float(state.t),
            "h_bar": h_bar,
            "Ra_e": effective_rayleigh(self.params.Ra, self.params.T_M, h_bar),
            "max_u": state.max_speed(),
            "melted_volume": volume - self.initial_volume,
            "front_deviation": float(np.abs(h - h_bar).max()),
            "convection_cells": float(convection_cells(state.v, h_bar, grid)),
            "enthalpy": float(state.T.sum() * d ** 2 + volume / self.params.St),
            "wall_heat_flux": bottom_flux + top_flux,
        }


def convection_cells(v: np.ndarray, h_bar: float, grid: Grid) -> int:
    """Number of counter-rotating rolls, from sign changes of v at mid-depth of the melt."""
    j = int(np.clip(round(0.5 * h_bar / grid.delta), 1, grid.ny - 1)) if grid.ny > 1 else 0
    row = v[:, j]
    peak = float(np.abs(row).max(initial=0.0))
    if peak < 1e-8:
        return 0
    signs = np.sign(np.where(np.abs(row) > 1e-3 * peak, row, 0.0))
    signs = signs[signs != 0]
    return int(np.sum(signs != np.roll(signs, 1)))


def detect_onset(rows: Sequence[Dict[str, float]], factor: float = 10.0) -> Optional[float]:
    """First time max|u| exceeds `factor` times its diffusive-regime plateau.

    The plateau is the largest max|u| while Ra_e is below half the critical value.
    """
    if not rows:
        return None
    quiet = [r["max_u"] for r in rows if r["Ra_e"] < 0.5 * RA_CRITICAL]
    plateau = max(quiet) if quiet else rows[0]["max_u"]
    plateau = max(plateau, 1e-12)
    for r in rows:
        if r["Ra_e"] >= 0.5 * RA_CRITICAL and r["max_u"] > factor * plateau:
            return float(r["t"])
    return None


def _checkpoint(index: int, state: FlowState, ls: LevelSetField, speed: Optional[np.ndarray]) -> Checkpoint:
    return Checkpoint(
        index=index,
        time=state.t,
        T=state.T.copy(),
        u=state.u.copy(),
        v=state.v.copy(),
        p=state.p.copy(),
        phi=ls.phi.copy(),
        speed=None if speed is None else speed.copy(),
    )


def run_forward(
    w_wall: WallData,
    params: PhysicalParams,
    grid: Grid,
    t_f: float,
    dt: float,
    options: Optional[ForwardOptions] = None,
    initial: Optional[Tuple[FlowState, LevelSetField]] = None,
) -> Trajectory:
    """March the coupled problem from rest (or from `initial`) to t_f.

    Checkpoint k holds the state at level k and the extended speed that moved the
    front from level k-1 to k. The run stops early once the mean front height
    passes stop_height*H.
    """
    opts = options or ForwardOptions()
    if dt <= 0:
        raise DomainError(f"dt must be positive, got {dt}")
    w = wall_array(w_wall, grid, params)

    if initial is None:
        ls = init_flat_interface(grid, params.h0)
        T0 = np.zeros(grid.shape)
        if opts.perturbation > 0:
            T0 += opts.perturbation * np.random.default_rng(opts.seed).standard_normal(grid.shape)
        state = FlowState.at_rest(grid, T=T0)
    else:
        state, ls = initial[0].copy(), initial[1].copy()
        grid.check_shape(state.T, "initial T")
    if t_f < state.t:
        raise DomainError(f"final time {t_f} is before the initial time {state.t}")
    n_steps = int(round((t_f - state.t) / dt))

    geom = build_geometry(ls)
    store = CheckpointStore(opts.checkpoint_budget_mb, opts.spill_dir)
    store.append(_checkpoint(0, state, ls, None))
    traj = Trajectory(grid=grid, params=params, dt=dt, w_wall=w, checkpoints=store)
    tracker = DiagnosticsTracker(grid, params, w, geom.liquid_volume())
    traj.diagnostics.append(tracker.row(state, ls, geom))

    logger.info("forward run: %d steps of dt=%.3e on %dx%d, Ra=%.3g", n_steps, dt, grid.nx, grid.ny, params.Ra)
    for n in tqdm(range(n_steps), desc="forward", disable=not opts.progress, leave=False):
        try:
            state, ls, geom, F = forward_step(state, ls, geom, w, params, dt, opts, n)
            row = tracker.row(state, ls, geom)
        except SolverError as exc:
            raise StepError(n, state.t, exc) from exc
        store.append(_checkpoint(n + 1, state, ls, F))
        traj.diagnostics.append(row)
        if row["h_bar"] > opts.stop_height * grid.height:
            logger.warning("front reached h=%.3f at t=%.4f, stopping early", row["h_bar"], state.t)
            traj.stopped_early = True
            break
    return traj


def similarity_lambda(params: PhysicalParams, w: float) -> float:
    """Root of the two-phase Stefan transcendental equation for a front s = 2*lambda*sqrt(t)."""
    if not w < params.T_M:
        raise DomainError("similarity solution needs w < T_M")
    hot = params.T_b - params.T_M
    cold = params.T_M - w

    def residual(lam: float) -> float:
        return lam * math.sqrt(math.pi) - params.St * math.exp(-lam ** 2) * (hot / erf(lam) - cold / erfc(lam))

    return float(bisect(residual, 1e-8, 4.0, xtol=1e-14, maxiter=200))


def similarity_front(lam: float, t: float) -> float:
    return 2.0 * lam * math.sqrt(t)


def similarity_state(grid: Grid, params: PhysicalParams, w: float, t: float) -> Tuple[FlowState, LevelSetField]:
    """Temperature and front of the 1D two-phase similarity solution at time t > 0."""
    if t <= 0:
        raise DomainError("similarity state needs t > 0")
    lam = similarity_lambda(params, w)
    s = similarity_front(lam, t)
    _, Y = grid.mesh()
    eta = Y / (2.0 * math.sqrt(t))
    T_liquid = params.T_b - (params.T_b - params.T_M) * erf(eta) / erf(lam)
    T_solid = w + (params.T_M - w) * erfc(eta) / erfc(lam)
    T = np.where(Y < s, T_liquid, T_solid)
    return FlowState.at_rest(grid, T=T, t=t), LevelSetField(grid, s - Y)
