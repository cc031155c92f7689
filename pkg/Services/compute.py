"""Cell geometry of the melting front: phase masks, cut cells, normals, curvature,
and one-sided probing of fields along the interface normal."""
from __future__ import annotations

import logging
from typing import Tuple, Union

import numpy as np

from Models.state import Grid, LevelSetField, Normals, PhaseGeometry

logger = logging.getLogger(__name__)

GRAD_EPS = 1e-12

# corner offsets of a cell in counter-clockwise order, in units of delta/2
_CORNERS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])


def get_area(coords):
    coords = np.array(coords)
    if coords.shape[0] < 3:
        return 0.0
    x = coords[:, 0]
    y = coords[:, 1]
    return float(np.abs(0.5 * np.array(np.dot(x, np.roll(y, 1)) - np.dot(y, np.roll(x, 1)))))


def clip_liquid_polygon(points: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Part of a cell polygon where the linearly interpolated level set is positive."""
    out = []
    n = len(values)
    for a in range(n):
        b = (a + 1) % n
        va, vb = values[a], values[b]
        if va > 0:
            out.append(points[a])
        if (va > 0) != (vb > 0):
            t = va / (va - vb)
            out.append(points[a] + t * (points[b] - points[a]))
    return np.array(out).reshape(-1, 2)


def pad_cells(field: np.ndarray, width: int = 1) -> np.ndarray:
    # periodic in x, linear extrapolation through the walls in y
    out = np.pad(field, ((0, 0), (width, width)), mode="reflect", reflect_type="odd")
    return np.pad(out, ((width, width), (0, 0)), mode="wrap")


def node_values(phi: np.ndarray) -> np.ndarray:
    """Values at cell corners, shape (nx+1, ny+1); node [a, b] sits at (a*delta, b*delta)."""
    P = pad_cells(phi)
    return 0.25 * (P[:-1, :-1] + P[1:, :-1] + P[:-1, 1:] + P[1:, 1:])


def central_gradient(field: np.ndarray, delta: float) -> Tuple[np.ndarray, np.ndarray]:
    P = pad_cells(field)
    gx = (P[2:, 1:-1] - P[:-2, 1:-1]) / (2 * delta)
    gy = (P[1:-1, 2:] - P[1:-1, :-2]) / (2 * delta)
    return gx, gy


def _neighbor(a: np.ndarray, di: int, dj: int) -> np.ndarray:
    out = np.roll(a, -di, axis=0)
    if dj:
        padded = np.pad(out, ((0, 0), (1, 1)), mode="edge")
        out = padded[:, 1 + dj: padded.shape[1] - 1 + dj]
    return out


def compute_normals(ls: LevelSetField) -> Normals:
    gx, gy = central_gradient(ls.phi, ls.grid.delta)
    norm = np.hypot(gx, gy)
    flagged = norm <= GRAD_EPS
    nx = np.zeros_like(gx)
    ny = np.zeros_like(gy)
    ok = ~flagged
    nx[ok] = gx[ok] / norm[ok]
    ny[ok] = gy[ok] / norm[ok]

    if flagged.any():
        logger.debug("vanishing level-set gradient in %d cells", int(flagged.sum()))
        if not ok.any():
            ny[:] = -1.0
        else:
            missing = flagged.copy()
            for _ in range(max(ls.grid.nx, ls.grid.ny)):
                if not missing.any():
                    break
                for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    src_ok = _neighbor(~missing, di, dj)
                    take = missing & src_ok
                    if take.any():
                        nx[take] = _neighbor(nx, di, dj)[take]
                        ny[take] = _neighbor(ny, di, dj)[take]
                        missing &= ~take
    return Normals(nx=nx, ny=ny, grad_norm=norm, flagged=flagged)


def compute_curvature(ls: LevelSetField) -> Tuple[np.ndarray, np.ndarray]:
    """Mean curvature div(grad phi / |grad phi|); returns (kappa, flagged)."""
    d = ls.grid.delta
    P = pad_cells(ls.phi)
    c = P[1:-1, 1:-1]
    px = (P[2:, 1:-1] - P[:-2, 1:-1]) / (2 * d)
    py = (P[1:-1, 2:] - P[1:-1, :-2]) / (2 * d)
    pxx = (P[2:, 1:-1] - 2 * c + P[:-2, 1:-1]) / d ** 2
    pyy = (P[1:-1, 2:] - 2 * c + P[1:-1, :-2]) / d ** 2
    pxy = (P[2:, 2:] - P[2:, :-2] - P[:-2, 2:] + P[:-2, :-2]) / (4 * d ** 2)
    norm = np.hypot(px, py)
    flagged = norm <= GRAD_EPS
    kappa = np.zeros_like(c)
    ok = ~flagged
    kappa[ok] = (
        pxx[ok] * py[ok] ** 2 - 2 * px[ok] * py[ok] * pxy[ok] + pyy[ok] * px[ok] ** 2
    ) / norm[ok] ** 3
    return kappa, flagged


def _aperture(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    pa, pb = a > 0, b > 0
    out = np.where(pa & pb, 1.0, 0.0)
    mixed = pa != pb
    if mixed.any():
        with np.errstate(divide="ignore", invalid="ignore"):
            frac = np.where(pa, a, b) / np.abs(a - b)
        out[mixed] = frac[mixed]
    return out


def build_geometry(ls: LevelSetField) -> PhaseGeometry:
    grid, phi = ls.grid, ls.phi
    d = grid.delta
    liquid = phi > 0

    N = node_values(phi)
    corners = np.stack([N[:-1, :-1], N[1:, :-1], N[1:, 1:], N[:-1, 1:]], axis=-1)
    pos = corners > 0
    cut = pos.any(axis=-1) & ~pos.all(axis=-1)

    fraction = pos.all(axis=-1).astype(float)
    cells = np.argwhere(cut)
    X, Y = grid.mesh()
    centers = np.stack([X[cut], Y[cut]], axis=-1)
    offsets = 0.5 * d * _CORNERS
    for i, j in cells:
        poly = clip_liquid_polygon(offsets, corners[i, j])
        fraction[i, j] = get_area(poly) / d ** 2

    # segment endpoints: first two sign changes walking the cell edges
    vals = corners[cut]
    va = vals
    vb = np.roll(vals, -1, axis=1)
    crosses = (va > 0) != (vb > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(crosses, va / (va - vb), 0.0)
    pa = offsets[None, :, :]
    pb = np.roll(offsets, -1, axis=0)[None, :, :]
    pts = pa + t[..., None] * (pb - pa)
    order = np.argsort(~crosses, axis=1, kind="stable")
    rows = np.arange(cells.shape[0])
    seg_start = centers + pts[rows, order[:, 0]] if len(cells) else np.zeros((0, 2))
    seg_end = centers + pts[rows, order[:, 1]] if len(cells) else np.zeros((0, 2))
    seg_mid = 0.5 * (seg_start + seg_end)
    seg_length = np.linalg.norm(seg_end - seg_start, axis=1)

    normals = compute_normals(ls)
    seg_normal = np.stack([normals.nx[cut], normals.ny[cut]], axis=-1)

    aperture_x = _aperture(N[:-1, :-1], N[:-1, 1:])
    aperture_y = _aperture(N[:-1, :], N[1:, :])

    return PhaseGeometry(
        grid=grid,
        phi=phi,
        liquid=liquid,
        cut=cut,
        fraction=fraction,
        aperture_x=aperture_x,
        aperture_y=aperture_y,
        cut_cells=cells,
        seg_start=seg_start,
        seg_end=seg_end,
        seg_mid=seg_mid,
        seg_normal=seg_normal,
        seg_length=seg_length,
        normals=normals,
    )


def _bilinear(F: np.ndarray, points: np.ndarray, delta: float, row_shift: float):
    nx, rows = F.shape
    fx = points[:, 0] / delta - 0.5
    i0 = np.floor(fx).astype(int)
    tx = fx - i0
    i1 = np.mod(i0 + 1, nx)
    i0 = np.mod(i0, nx)
    fy = points[:, 1] / delta - 0.5 + row_shift
    r0 = np.floor(fy).astype(int)
    ty = fy - r0
    valid = (r0 >= 0) & (r0 + 1 < rows)
    r0 = np.clip(r0, 0, rows - 2)
    r1 = r0 + 1
    value = (
        (1 - tx) * (1 - ty) * F[i0, r0]
        + tx * (1 - ty) * F[i1, r0]
        + (1 - tx) * ty * F[i0, r1]
        + tx * ty * F[i1, r1]
    )
    return value, valid, (i0, i1, r0, r1)


def interpolate(field: np.ndarray, points: np.ndarray, grid: Grid) -> np.ndarray:
    """Bilinear interpolation of a cell field at arbitrary points (periodic x)."""
    points = np.atleast_2d(points)
    padded = np.pad(field, ((0, 0), (1, 1)), mode="reflect", reflect_type="odd")
    value, _, _ = _bilinear(padded, points, grid.delta, 1.0)
    return value


WallValue = Union[float, np.ndarray]


def _nearest_phase_centre(
    field: np.ndarray,
    geom: PhaseGeometry,
    phase: np.ndarray,
    ray: np.ndarray,
    rows: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """Value and distance along `ray` of the same-phase centre closest to the ray.

    Looks at the 3x3 block around each selected cut cell, at least half a cell ahead
    of the segment midpoint. Distance is inf where no centre qualifies.
    """
    grid = geom.grid
    d = grid.delta
    nx, ny = grid.shape
    cells = geom.cut_cells[rows]
    mid = geom.seg_mid[rows]
    r = ray[rows]
    value = np.zeros(len(rows))
    dist = np.full(len(rows), np.inf)
    offset = np.full(len(rows), np.inf)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            i = cells[:, 0] + di
            j = cells[:, 1] + dj
            inside = (j >= 0) & (j < ny)
            ic, jc = i % nx, np.clip(j, 0, ny - 1)
            rel_x = (i + 0.5) * d - mid[:, 0]
            rel_y = (j + 0.5) * d - mid[:, 1]
            along = rel_x * r[:, 0] + rel_y * r[:, 1]
            off = np.abs(rel_x * r[:, 1] - rel_y * r[:, 0])
            better = inside & phase[ic, jc] & (along >= 0.5 * d) & (off < offset)
            value = np.where(better, field[ic, jc], value)
            dist = np.where(better, along, dist)
            offset = np.where(better, off, offset)
    return value, dist


def normal_gradients(
    field: np.ndarray,
    geom: PhaseGeometry,
    interface_value: Union[float, np.ndarray],
    side: str,
    bottom: WallValue,
    top: WallValue,
    offsets: Tuple[float, float] = (1.5, 2.5),
) -> Tuple[np.ndarray, np.ndarray]:
    """One-sided derivative along the liquid-pointing normal at every segment midpoint.

    side="liquid" samples along +n, side="solid" along -n; both return d(field)/dn.
    Returns (gradient per segment, flagged per segment).
    """
    grid = geom.grid
    d = grid.delta
    nseg = geom.n_segments
    if nseg == 0:
        return np.zeros(0), np.zeros(0, dtype=bool)

    sign = 1.0 if side == "liquid" else -1.0
    phase = geom.liquid if side == "liquid" else ~geom.liquid

    bottom = np.broadcast_to(np.asarray(bottom, dtype=float), (grid.nx,))
    top = np.broadcast_to(np.asarray(top, dtype=float), (grid.nx,))
    padded = np.concatenate(
        [(2 * bottom - field[:, 0])[:, None], field, (2 * top - field[:, -1])[:, None]], axis=1
    )
    phase_padded = np.concatenate([phase[:, :1], phase, phase[:, -1:]], axis=1)

    ray = sign * geom.seg_normal
    mid = geom.seg_mid
    with np.errstate(divide="ignore", invalid="ignore"):
        to_wall = np.where(
            ray[:, 1] < -GRAD_EPS,
            mid[:, 1] / -ray[:, 1],
            np.where(ray[:, 1] > GRAD_EPS, (grid.height - mid[:, 1]) / ray[:, 1], np.inf),
        )
    d1 = np.full(nseg, offsets[0] * d)
    d2 = np.full(nseg, offsets[1] * d)
    short = to_wall < d2
    d1[short] = 0.5 * to_wall[short]
    d2[short] = to_wall[short]

    def sample(dist):
        pts = mid + dist[:, None] * ray
        pts[:, 1] = np.clip(pts[:, 1], 0.0, grid.height)
        val, valid, (i0, i1, r0, r1) = _bilinear(padded, pts, d, 1.0)
        same = phase_padded[i0, r0] & phase_padded[i1, r0] & phase_padded[i0, r1] & phase_padded[i1, r1]
        return val, valid & same

    T0 = np.broadcast_to(np.asarray(interface_value, dtype=float), (nseg,))
    T1, ok1 = sample(d1)
    T2, ok2 = sample(d2)

    with np.errstate(divide="ignore", invalid="ignore"):
        quad = ((T1 - T0) * d2 ** 2 - (T2 - T0) * d1 ** 2) / (d1 * d2 * (d2 - d1))
        lin = (T1 - T0) / d1
    deriv = np.where(ok1 & ok2, quad, np.where(ok1, lin, 0.0))
    blind = np.flatnonzero(~ok1 & ~ok2)
    if blind.size:
        # first-order difference to the nearest centre of the same phase
        value, dist = _nearest_phase_centre(field, geom, phase, ray, blind)
        found = np.isfinite(dist)
        deriv[blind[found]] = (value[found] - T0[blind[found]]) / dist[found]
    deriv = np.where(np.isfinite(deriv), deriv, 0.0)
    flagged = ~(ok1 & ok2)
    if flagged.any():
        logger.debug("%s-side sampling fallback on %d of %d segments", side, int(flagged.sum()), nseg)
    return sign * deriv, flagged
