from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional

import numpy as np

from Services.errors import DomainError, GridMismatchError


@dataclass(frozen=True)
class Grid:
    """Uniform periodic-in-x Cartesian mesh. Arrays are indexed [i, j] with i along x."""

    nx: int
    ny: int
    aspect_ratio: float
    height: float = 1.0

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise DomainError(f"grid needs positive cell counts, got {self.nx}x{self.ny}")
        if self.aspect_ratio <= 0 or self.height <= 0:
            raise DomainError("aspect ratio and height must be positive")
        if not math.isclose(self.nx * self.delta, self.aspect_ratio * self.height, rel_tol=1e-9):
            raise DomainError(
                f"cells are not square: nx={self.nx} ny={self.ny} b={self.aspect_ratio} (need nx = b*ny)"
            )

    @classmethod
    def from_ny(cls, ny: int, aspect_ratio: float, height: float = 1.0) -> "Grid":
        return cls(nx=int(round(aspect_ratio * ny)), ny=ny, aspect_ratio=aspect_ratio, height=height)

    @property
    def delta(self) -> float:
        return self.height / self.ny

    @property
    def width(self) -> float:
        return self.aspect_ratio * self.height

    @property
    def shape(self):
        return (self.nx, self.ny)

    @property
    def x_centers(self) -> np.ndarray:
        return (np.arange(self.nx) + 0.5) * self.delta

    @property
    def y_centers(self) -> np.ndarray:
        return (np.arange(self.ny) + 0.5) * self.delta

    def mesh(self):
        return np.meshgrid(self.x_centers, self.y_centers, indexing="ij")

    def centered_x(self) -> np.ndarray:
        # wall coordinate measured from the domain midpoint
        return self.x_centers - 0.5 * self.width

    def check_shape(self, arr: np.ndarray, name: str = "field", extra_y: int = 0):
        expected = (self.nx, self.ny + extra_y)
        if arr.shape != expected:
            raise GridMismatchError(f"{name} has shape {arr.shape}, grid expects {expected}")


@dataclass
class LevelSetField:
    grid: Grid
    phi: np.ndarray

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=float)
        self.grid.check_shape(self.phi, "phi")

    def with_phi(self, phi: np.ndarray) -> "LevelSetField":
        return LevelSetField(self.grid, phi)

    def copy(self) -> "LevelSetField":
        return LevelSetField(self.grid, self.phi.copy())


@dataclass
class Normals:
    nx: np.ndarray
    ny: np.ndarray
    grad_norm: np.ndarray
    flagged: np.ndarray


@dataclass
class PhaseGeometry:
    """Per-cell phase data plus one interface segment per cut cell.

    Segment arrays are aligned with `cut_cells` (row k belongs to cell cut_cells[k]).
    Normals point into the liquid.
    """

    grid: Grid
    phi: np.ndarray
    liquid: np.ndarray
    cut: np.ndarray
    fraction: np.ndarray
    aperture_x: np.ndarray
    aperture_y: np.ndarray
    cut_cells: np.ndarray
    seg_start: np.ndarray
    seg_end: np.ndarray
    seg_mid: np.ndarray
    seg_normal: np.ndarray
    seg_length: np.ndarray
    normals: Normals

    SOLID = 0
    LIQUID = 1
    CUT = 2

    @property
    def solid(self) -> np.ndarray:
        return ~self.liquid

    @property
    def classification(self) -> np.ndarray:
        out = np.where(self.liquid, self.LIQUID, self.SOLID)
        out[self.cut] = self.CUT
        return out

    @property
    def n_segments(self) -> int:
        return int(self.cut_cells.shape[0])

    def liquid_volume(self) -> float:
        return float(self.fraction.sum() * self.grid.delta ** 2)


@dataclass(frozen=True)
class PhysicalParams:
    Ra: float = 1e5
    Pr: float = 1.0
    St: float = 1.0
    T_b: float = 0.7
    T_M: float = 0.0
    h0: float = 0.05

    def __post_init__(self):
        if self.Ra < 0:
            raise DomainError(f"Ra must be >= 0 (0 disables convection), got {self.Ra}")
        if self.Pr <= 0 or self.St <= 0:
            raise DomainError("Pr and St must be positive")
        if not self.T_M < self.T_b:
            raise DomainError(f"need T_M < T_b, got T_M={self.T_M} T_b={self.T_b}")

    @property
    def convective(self) -> bool:
        return self.Ra > 0


@dataclass(frozen=True)
class ExtensionSettings:
    pseudo_time_ratio: float = 0.45
    nb_width: int = 8
    tolerance: float = 1e-10
    converge: bool = False

    def __post_init__(self):
        if not 0 < self.pseudo_time_ratio <= 0.5:
            raise DomainError(f"pseudo_time_ratio must lie in (0, 0.5], got {self.pseudo_time_ratio}")
        if self.nb_width < 4:
            raise DomainError(f"nb_width must be >= 4 cells, got {self.nb_width}")

    @property
    def iterations(self) -> int:
        """Pseudo-time iterations: the band width, or a cap when iterating to tolerance."""
        if not self.converge:
            return self.nb_width
        return int(math.ceil(8 * self.nb_width / self.pseudo_time_ratio))


@dataclass
class FlowState:
    u: np.ndarray
    v: np.ndarray
    p: np.ndarray
    T: np.ndarray
    t: float = 0.0

    @classmethod
    def at_rest(cls, grid: Grid, T: Optional[np.ndarray] = None, t: float = 0.0) -> "FlowState":
        return cls(
            u=np.zeros(grid.shape),
            v=np.zeros((grid.nx, grid.ny + 1)),
            p=np.zeros(grid.shape),
            T=np.zeros(grid.shape) if T is None else np.array(T, dtype=float),
            t=t,
        )

    def copy(self) -> "FlowState":
        return FlowState(self.u.copy(), self.v.copy(), self.p.copy(), self.T.copy(), self.t)

    def max_speed(self) -> float:
        return float(max(np.abs(self.u).max(initial=0.0), np.abs(self.v).max(initial=0.0)))


@dataclass
class StefanSpeed:
    """Front speed on cut cells (positive = melting, front moves into the solid)."""

    values: np.ndarray
    mask: np.ndarray
    flagged: np.ndarray
    grad_liquid: np.ndarray
    grad_solid: np.ndarray

    def at_cells(self, cells: np.ndarray) -> np.ndarray:
        return self.values[cells[:, 0], cells[:, 1]]


@dataclass
class Checkpoint:
    """State at one time level. `speed` is the extended speed that brought phi to this level (None at level 0)."""

    index: int
    time: float
    T: np.ndarray
    u: np.ndarray
    v: np.ndarray
    p: np.ndarray
    phi: np.ndarray
    speed: Optional[np.ndarray] = None

    def nbytes(self) -> int:
        arrays = [self.T, self.u, self.v, self.p, self.phi]
        if self.speed is not None:
            arrays.append(self.speed)
        return int(sum(a.nbytes for a in arrays))


@dataclass
class Trajectory:
    grid: Grid
    params: PhysicalParams
    dt: float
    w_wall: np.ndarray
    checkpoints: Any
    diagnostics: List[Dict[str, float]] = field(default_factory=list)
    stopped_early: bool = False

    @property
    def n_steps(self) -> int:
        return len(self.checkpoints) - 1

    @property
    def initial(self) -> Checkpoint:
        return self.checkpoints[0]

    @property
    def final(self) -> Checkpoint:
        return self.checkpoints[len(self.checkpoints) - 1]

    @property
    def duration(self) -> float:
        return self.final.time - self.initial.time

    @property
    def times(self) -> np.ndarray:
        return np.array([self.checkpoints.time_of(k) for k in range(len(self.checkpoints))])


@dataclass(frozen=True)
class CostWeights:
    beta1: float = 1.0
    beta2: float = 1.0
    beta3: float = 1e-3

    def __post_init__(self):
        if min(self.beta1, self.beta2, self.beta3) < 0:
            raise DomainError("cost weights must be nonnegative")
        if self.beta3 <= 0:
            raise DomainError("beta3 must be positive")


@dataclass
class DesiredState:
    grid: Grid
    T_d: np.ndarray
    phi_d: np.ndarray

    def __post_init__(self):
        self.grid.check_shape(self.T_d, "T_d")
        self.grid.check_shape(self.phi_d, "phi_d")


@dataclass
class AdjointState:
    """Adjoint temperature (both phases) and adjoint level set.

    interface_theta = psi*|grad phi| on every cell; its cut-cell values become the
    interface Dirichlet data of the adjoint solid step.
    """

    Theta: np.ndarray
    psi: np.ndarray
    interface_theta: np.ndarray
    t: float

    def copy(self) -> "AdjointState":
        return replace(
            self,
            Theta=self.Theta.copy(),
            psi=self.psi.copy(),
            interface_theta=self.interface_theta.copy(),
        )


@dataclass
class ControlVector:
    coefficients: np.ndarray

    def __post_init__(self):
        self.coefficients = np.atleast_1d(np.asarray(self.coefficients, dtype=float))
        if not np.all(np.isfinite(self.coefficients)):
            raise DomainError(f"control coefficients must be finite, got {self.coefficients}")

    def __len__(self) -> int:
        return self.coefficients.size
