"""Level-set kinematics of the melting front.

Sign convention: phi > 0 in the liquid (lower layer), phi < 0 in the solid.
A positive extended speed F moves the front into the solid, i.e. phi_t = F |grad phi|.
"""
from __future__ import annotations

import logging
import math
from typing import Optional, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from Models.state import ExtensionSettings, Grid, LevelSetField, Normals, StefanSpeed
from Services.compute import central_gradient, compute_normals, node_values, _neighbor
from Services.errors import DomainError, ExtensionError, LinearSolveError, MultivaluedFrontError

logger = logging.getLogger(__name__)

GRAD_FLOOR = 1e-8
RA_CRITICAL = 1707.76


def init_flat_interface(grid: Grid, h0: float) -> LevelSetField:
    if not 0 < h0 < grid.height:
        raise DomainError(f"initial front height must lie in (0, {grid.height}), got {h0}")
    _, Y = grid.mesh()
    return LevelSetField(grid, h0 - Y)


def extend_velocity(
    ls: LevelSetField,
    speed: StefanSpeed,
    settings: ExtensionSettings = ExtensionSettings(),
    normals: Optional[Normals] = None,
    history: Optional[list] = None,
) -> np.ndarray:
    """Extend cut-cell speeds along the normals through the narrow band.

    Solves F_tau + S(phi) n . grad F = 0 with first-order upwinding; cut cells stay fixed,
    cells outside the band get 0. By default runs exactly ``nb_width`` Jacobi iterations
    with the local pseudo-time step delta / (|w_x| + |w_y|), which carries the front value
    one cell per iteration. With ``settings.converge`` the global step
    ``pseudo_time_ratio * delta`` is iterated until the update drops below ``tolerance``.
    Per-iteration max updates are appended to ``history`` when given.
    """
    grid = ls.grid
    d = grid.delta
    phi = ls.phi
    mask = speed.mask
    if not mask.any():
        return np.zeros(grid.shape)

    band = (np.abs(phi) <= settings.nb_width * d) & ~mask
    F = np.zeros(grid.shape)
    F[band] = float(speed.values[mask].mean())
    F[mask] = speed.values[mask]

    n = normals if normals is not None else compute_normals(ls)
    S = phi / np.sqrt(phi ** 2 + d ** 2)
    wx = S * n.nx
    wy = S * n.ny
    speed_sum = np.abs(wx) + np.abs(wy)
    if settings.converge:
        tau = np.full(grid.shape, settings.pseudo_time_ratio * d)
    else:
        tau = np.divide(d, speed_sum, out=np.zeros(grid.shape), where=speed_sum > 0)
    scale = max(1.0, float(np.abs(speed.values[mask]).max()))

    residuals = history if history is not None else []
    start = len(residuals)
    for _ in range(settings.iterations):
        P = np.pad(np.pad(F, ((1, 1), (0, 0)), mode="wrap"), ((0, 0), (1, 1)), mode="edge")
        c = P[1:-1, 1:-1]
        dxm = (c - P[:-2, 1:-1]) / d
        dxp = (P[2:, 1:-1] - c) / d
        dym = (c - P[1:-1, :-2]) / d
        dyp = (P[1:-1, 2:] - c) / d
        adv = (
            np.maximum(wx, 0) * dxm + np.minimum(wx, 0) * dxp
            + np.maximum(wy, 0) * dym + np.minimum(wy, 0) * dyp
        )
        update = np.where(band, -tau * adv, 0.0)
        F += update
        res = float(np.abs(update).max())
        residuals.append(res)
        if not math.isfinite(res):
            raise ExtensionError("velocity extension diverged", residuals[start:])
        if settings.converge and res <= settings.tolerance * scale:
            break
    else:
        if settings.converge:
            run = residuals[start:]
            if run[-1] >= run[0] and run[-1] > settings.tolerance * scale:
                raise ExtensionError("velocity extension residual is not decreasing", run)
            logger.debug("extension stopped at residual %.3e after %d iterations", run[-1], len(run))
    return F


def _edge_terms(phi: np.ndarray, V: np.ndarray, d: float):
    """Diamond-cell reconstruction on every interior edge.

    Yields (p_index, q_index, a_pq, a_qp) with flat cell indices; periodic in x.
    """
    nx, ny = phi.shape
    N = node_values(phi)
    idx = np.arange(nx * ny).reshape(nx, ny)

    # x-edges at x = i*delta between cells (i-1, j) and (i, j)
    php = np.roll(phi, 1, axis=0)
    vp = np.roll(V, 1, axis=0)
    n1, n2 = N[:-1, :-1], N[:-1, 1:]
    mean = 0.25 * (php + phi + n1 + n2)
    grad = np.maximum(np.sqrt((phi - php) ** 2 + (n2 - n1) ** 2) / d, GRAD_FLOOR)
    yield (
        np.roll(idx, 1, axis=0).ravel(),
        idx.ravel(),
        (vp * (php - mean) / grad).ravel(),
        (V * (phi - mean) / grad).ravel(),
    )

    # y-edges at y = j*delta between cells (i, j-1) and (i, j), interior only
    if ny > 1:
        pp, pq = phi[:, :-1], phi[:, 1:]
        n1, n2 = N[:-1, 1:-1], N[1:, 1:-1]
        mean = 0.25 * (pp + pq + n1 + n2)
        grad = np.maximum(np.sqrt((pq - pp) ** 2 + (n2 - n1) ** 2) / d, GRAD_FLOOR)
        yield (
            idx[:, :-1].ravel(),
            idx[:, 1:].ravel(),
            (V[:, :-1] * (pp - mean) / grad).ravel(),
            (V[:, 1:] * (pq - mean) / grad).ravel(),
        )


def _wall_terms(phi: np.ndarray, V: np.ndarray, d: float) -> np.ndarray:
    """Explicit wall-edge contribution using linearly extrapolated ghost values."""
    nx, ny = phi.shape
    out = np.zeros_like(phi)
    if ny < 2:
        return out
    N = node_values(phi)
    for j, jn, row in ((0, 1, 0), (ny - 1, ny - 2, ny)):
        p = phi[:, j]
        ghost = 2 * p - phi[:, jn]
        n1, n2 = N[:-1, row], N[1:, row]
        mean = 0.25 * (p + ghost + n1 + n2)
        grad = np.maximum(np.sqrt((ghost - p) ** 2 + (n2 - n1) ** 2) / d, GRAD_FLOOR)
        a = V[:, j] * (p - mean) / grad
        out[:, j] += a * (ghost - p)
    return out


def assemble_advection_system(ls: LevelSetField, F: np.ndarray, dt: float) -> Tuple[sp.csr_matrix, np.ndarray]:
    """Inflow-implicit/outflow-explicit system A phi^{n+1} = rhs for one level-set step.

    Forward diffusion (a > 0) sits on the implicit side, backward diffusion (a < 0) on the
    explicit side; A has unit-plus diagonal and nonpositive off-diagonals.
    """
    grid = ls.grid
    d = grid.delta
    phi = ls.phi
    V = -np.asarray(F, dtype=float)
    k = dt / d ** 2
    n = phi.size
    flat = phi.ravel()

    rows, cols, vals = [np.arange(n)], [np.arange(n)], [np.ones(n)]
    rhs = flat.copy()
    for p, q, a_pq, a_qp in _edge_terms(phi, V, d):
        for row, col, a in ((p, q, a_pq), (q, p, a_qp)):
            af = np.maximum(a, 0.0)
            ab = np.minimum(a, 0.0)
            rows += [row, row]
            cols += [row, col]
            vals += [k * af, -k * af]
            np.add.at(rhs, row, -k * ab * (flat[row] - flat[col]))
    rhs += k * _wall_terms(phi, V, d).ravel()

    A = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsr()
    return A, rhs


def advection_courant(ls: LevelSetField, F: np.ndarray, dt: float) -> float:
    """Largest per-cell sum of explicit (backward-diffusion) coefficients times dt / delta^2."""
    d = ls.grid.delta
    V = -np.asarray(F, dtype=float)
    total = np.zeros(ls.phi.size)
    for p, q, a_pq, a_qp in _edge_terms(ls.phi, V, d):
        np.add.at(total, p, -np.minimum(a_pq, 0.0))
        np.add.at(total, q, -np.minimum(a_qp, 0.0))
    return float(total.max(initial=0.0) * dt / d ** 2)


def advect_levelset(ls: LevelSetField, F: np.ndarray, dt: float) -> LevelSetField:
    if dt == 0 or not np.any(F):
        return ls.copy()
    courant = advection_courant(ls, F, dt)
    if courant > 0.5:
        logger.warning("level-set step above the 0.5 stability bound (%.3f); reduce dt", courant)
    A, rhs = assemble_advection_system(ls, F, dt)
    phi = spsolve(A, rhs)
    if not np.all(np.isfinite(phi)):
        raise LinearSolveError("level-set advection system is singular")
    residual = float(np.abs(A @ phi - rhs).max())
    if residual > 1e-8 * max(1.0, float(np.abs(rhs).max())):
        raise LinearSolveError("level-set advection solve did not converge", residual)
    return LevelSetField(ls.grid, phi.reshape(ls.grid.shape))


def reinitialize(
    ls: LevelSetField,
    nb_width: int = 8,
    tol: float = 1e-6,
    max_iter: int = 200,
) -> LevelSetField:
    """Restore the signed-distance property without moving the zero level.

    Cells next to a sign change keep phi / |grad phi|; the rest is filled by Jacobi
    sweeps of the Godunov Eikonal update, capped a few cells past the narrow band.
    """
    grid = ls.grid
    d = grid.delta
    phi = ls.phi
    pos = phi > 0

    iface = np.zeros_like(pos)
    for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        iface |= _neighbor(pos, di, dj) != pos

    gx, gy = central_gradient(phi, d)
    g = np.maximum(np.hypot(gx, gy), GRAD_FLOOR)
    cap = (nb_width + 3) * d
    U = np.full(grid.shape, cap)
    U[iface] = np.minimum(np.abs(phi[iface]) / g[iface], cap)

    converged = False
    for _ in range(max_iter):
        Px = np.pad(U, ((1, 1), (0, 0)), mode="wrap")
        a = np.minimum(Px[:-2], Px[2:])
        Py = np.pad(U, ((0, 0), (1, 1)), mode="constant", constant_values=np.inf)
        b = np.minimum(Py[:, :-2], Py[:, 2:])
        with np.errstate(invalid="ignore"):
            diff = a - b
            far = ~(np.abs(diff) < d)
            cand = np.where(
                far,
                np.minimum(a, b) + d,
                0.5 * (a + b + np.sqrt(np.maximum(2 * d ** 2 - diff ** 2, 0.0))),
            )
        new = np.where(iface, U, np.minimum(U, np.minimum(cand, cap)))
        change = float(np.abs(new - U).max())
        U = new
        if change <= tol:
            converged = True
            break
    if not converged:
        logger.warning("reinitialization stopped after %d sweeps (change %.3e)", max_iter, change)
    return LevelSetField(grid, np.where(pos, U, -U))


def column_heights(ls: LevelSetField) -> np.ndarray:
    """Front height per column from the linear zero crossing of phi."""
    grid = ls.grid
    phi = ls.phi
    pos = phi > 0
    changes = pos[:, :-1] != pos[:, 1:]
    counts = changes.sum(axis=1)
    if np.any(counts > 1):
        col = int(np.argmax(counts > 1))
        raise MultivaluedFrontError(col, int(counts[col]))

    h = np.where(pos.all(axis=1), grid.height, 0.0)
    cols = np.flatnonzero(counts == 1)
    if cols.size:
        j = np.argmax(changes[cols], axis=1)
        p0 = phi[cols, j]
        p1 = phi[cols, j + 1]
        h[cols] = grid.y_centers[j] + grid.delta * p0 / (p0 - p1)
    return h


def average_height(ls: LevelSetField) -> float:
    return float(column_heights(ls).mean())


def effective_rayleigh(Ra: float, T_M: float, h_bar: float) -> float:
    if h_bar < 0:
        raise DomainError(f"average height must be nonnegative, got {h_bar}")
    return Ra * (1.0 - T_M) * h_bar ** 3
