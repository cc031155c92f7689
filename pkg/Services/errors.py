from __future__ import annotations
from typing import List, Optional, Sequence


class RBMeltError(Exception):
    """Base for everything raised by the solver services."""


class DomainError(RBMeltError, ValueError):
    pass


class ConfigError(DomainError):
    pass


class GridMismatchError(DomainError):
    pass


class SolverError(RBMeltError, RuntimeError):
    pass


class LinearSolveError(SolverError):
    def __init__(self, message: str, residual: Optional[float] = None):
        if residual is not None:
            message = f"{message} (residual {residual:.3e})"
        super().__init__(message)
        self.residual = residual


class CFLError(SolverError):
    def __init__(self, courant: float, dt: float):
        super().__init__(
            f"CFL violated: |u| dt / delta = {courant:.3f} > 1 at dt = {dt:.3e}; reduce dt"
        )
        self.courant = courant
        self.dt = dt


class ExtensionError(SolverError):
    def __init__(self, message: str, residuals: Sequence[float]):
        super().__init__(f"{message}; residual history: {[float(r) for r in residuals]}")
        self.residuals: List[float] = [float(r) for r in residuals]


class MultivaluedFrontError(SolverError):
    def __init__(self, column: int, crossings: int):
        super().__init__(f"front is not a graph over x: column {column} has {crossings} zero crossings")
        self.column = column
        self.crossings = crossings


class OptimizationError(SolverError):
    pass


class MissingCheckpointError(SolverError):
    def __init__(self, index: int):
        super().__init__(f"no checkpoint stored for time index {index}")
        self.index = index


class StepError(SolverError):
    """Wraps a sub-step failure with the time-step context it happened in."""

    def __init__(self, step: int, time: float, cause: Exception, reverse: bool = False):
        where = "reverse step" if reverse else "step"
        super().__init__(f"{where} {step} (t = {time:.6e}): {cause}")
        self.step = step
        self.time = time
        self.cause = cause
        self.reverse = reverse
