"""Parametrizations of the top-wall temperature w(x)."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from Models.state import ControlVector, Grid
from Services.errors import DomainError

logger = logging.getLogger(__name__)

KINDS = {"tanh_basis": 2, "trig_power_basis": 8}
CLAMP_MARGIN = 1e-6


def _sign(a: np.ndarray) -> np.ndarray:
    # subgradient of |a| with sign(0) = 1
    return np.where(a >= 0, 1.0, -1.0)


@dataclass(frozen=True)
class Basis:
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown basis {self.kind!r}; expected one of {sorted(KINDS)}")

    @property
    def dimension(self) -> int:
        return KINDS[self.kind]

    def _coefficients(self, a) -> np.ndarray:
        a = a.coefficients if isinstance(a, ControlVector) else np.atleast_1d(np.asarray(a, dtype=float))
        if a.size != self.dimension:
            raise DomainError(f"{self.kind} takes {self.dimension} coefficients, got {a.size}")
        return a

    def evaluate(self, a, x: np.ndarray) -> np.ndarray:
        """w at centred positions x, before clamping."""
        a = self._coefficients(a)
        x = np.asarray(x, dtype=float)
        if self.kind == "tanh_basis":
            bump = 1.0 - np.tanh(2.0 * x) ** 2
            return -abs(a[0]) - abs(a[1]) * bump
        s = np.sin(2.0 * np.pi * x)
        c = np.cos(2.0 * np.pi * x)
        powers = np.arange(1, 5)
        return (a[:4, None] * s[None, :] ** powers[:, None]).sum(axis=0) + (
            a[4:, None] * c[None, :] ** powers[:, None]
        ).sum(axis=0)

    def jacobian(self, a, x: np.ndarray) -> np.ndarray:
        """dw/da at each position, shape (len(x), dimension)."""
        a = self._coefficients(a)
        x = np.asarray(x, dtype=float)
        if self.kind == "tanh_basis":
            bump = 1.0 - np.tanh(2.0 * x) ** 2
            sa = _sign(a)
            return np.stack([np.full_like(x, -sa[0]), -sa[1] * bump], axis=-1)
        s = np.sin(2.0 * np.pi * x)
        c = np.cos(2.0 * np.pi * x)
        cols = [s ** n for n in range(1, 5)] + [c ** n for n in range(1, 5)]
        return np.stack(cols, axis=-1)

    def wall(self, a, grid: Grid, T_M: float = 0.0) -> np.ndarray:
        """Wall temperature on the column centres, clamped to stay below T_M."""
        w = self.evaluate(a, grid.centered_x())
        limit = T_M - CLAMP_MARGIN
        clamped = w > limit
        if clamped.any():
            logger.info("clamped w on %d of %d columns to %.1e", int(clamped.sum()), w.size, limit)
        return np.minimum(w, limit)


def eval_basis(basis: Basis, a, x) -> np.ndarray:
    return basis.evaluate(a, np.atleast_1d(x))


def project_gradient(basis: Basis, a, grid: Grid, column_gradient: np.ndarray, mode: str = "chain") -> np.ndarray:
    """Coefficient gradient from dJ/dw per column.

    "chain" applies the basis Jacobian; "fit" takes the least-squares coefficients
    of the wall gradient density in the basis functions.
    """
    J = basis.jacobian(a, grid.centered_x())
    column_gradient = np.asarray(column_gradient, dtype=float)
    if column_gradient.shape != (grid.nx,):
        raise DomainError(f"column gradient has shape {column_gradient.shape}, expected ({grid.nx},)")
    if mode == "chain":
        return J.T @ column_gradient
    if mode == "fit":
        coeffs, *_ = np.linalg.lstsq(J, column_gradient / grid.delta, rcond=None)
        return coeffs
    raise DomainError(f"gradient mode must be 'chain' or 'fit', got {mode!r}")
