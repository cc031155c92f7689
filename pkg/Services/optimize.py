"""Minimization of the melting cost over basis coefficients.

ControlProblem wraps forward + adjoint runs and counts them; lbfgs_minimize and
pso_minimize only see cost/gradient callables on coefficient vectors.
"""
from __future__ import annotations

import logging
import math
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import repeat
from typing import Callable, Deque, Dict, List, Optional, Sequence, Tuple

import numpy as np

from Models.state import CostWeights, DesiredState, Grid, PhysicalParams, Trajectory
from Services.adjoint import AdjointOptions, AdjointResult, evaluate_cost, run_adjoint
from Services.basis import Basis, project_gradient
from Services.errors import DomainError, OptimizationError
from Services.forward import ForwardOptions, run_forward

logger = logging.getLogger(__name__)


@dataclass
class ControlProblem:
    params: PhysicalParams
    grid: Grid
    t_f: float
    dt: float
    basis: Basis
    desired: DesiredState
    weights: CostWeights
    forward: ForwardOptions = ForwardOptions()
    adjoint: AdjointOptions = AdjointOptions()
    gradient_mode: str = "chain"
    workers: int = 1
    j_calls: int = field(default=0, init=False)
    grad_calls: int = field(default=0, init=False)
    last_adjoint: Optional[AdjointResult] = field(default=None, init=False, repr=False)
    _cache: Optional[Tuple[np.ndarray, Trajectory]] = field(default=None, init=False, repr=False)

    def __getstate__(self):
        # worker copies never carry trajectories
        state = self.__dict__.copy()
        state["_cache"] = None
        state["last_adjoint"] = None
        return state

    def wall(self, a: np.ndarray) -> np.ndarray:
        return self.basis.wall(a, self.grid, self.params.T_M)

    def simulate(self, a: np.ndarray) -> Trajectory:
        a = np.array(a, dtype=float)
        traj = run_forward(self.wall(a), self.params, self.grid, self.t_f, self.dt, self.forward)
        self.j_calls += 1
        self._cache = (a, traj)
        return traj

    def _trajectory(self, a: np.ndarray) -> Trajectory:
        if self._cache is not None and np.array_equal(self._cache[0], a):
            return self._cache[1]
        return self.simulate(a)

    def cost(self, a: np.ndarray) -> float:
        a = np.asarray(a, dtype=float)
        return evaluate_cost(self.simulate(a), self.desired, self.wall(a), self.weights)

    def gradient(self, a: np.ndarray) -> np.ndarray:
        """Adjoint gradient; reuses the forward run of the last cost call at the same point."""
        a = np.asarray(a, dtype=float)
        traj = self._trajectory(a)
        result = run_adjoint(traj, self.desired, self.weights, self.adjoint)
        self.grad_calls += 1
        self.last_adjoint = result
        return project_gradient(self.basis, a, self.grid, result.grad_w, self.gradient_mode)

    def value_and_gradient(self, a: np.ndarray) -> Tuple[float, np.ndarray]:
        J = self.cost(a)
        return J, self.gradient(a)

    def cost_batch(self, points: Sequence[np.ndarray]) -> List[float]:
        points = [np.asarray(p, dtype=float) for p in points]
        if self.workers > 1 and len(points) > 1:
            with ProcessPoolExecutor(max_workers=min(self.workers, len(points))) as pool:
                values = list(pool.map(_evaluate, repeat(self), points))
            self.j_calls += len(points)
            return values
        return [self.cost(p) for p in points]


def _evaluate(problem: ControlProblem, a: np.ndarray) -> float:
    return problem.cost(a)


@dataclass(frozen=True)
class LbfgsSettings:
    memory: int = 10
    max_iter: int = 25
    armijo: float = 1e-4
    shrink: float = 0.5
    max_backtracks: int = 20
    xtol: float = 1e-8
    ftol: float = 1e-8
    gtol: float = 1e-6
    relax: bool = False
    relax_window: int = 3


@dataclass
class OptimizationResult:
    coefficients: np.ndarray
    J: float
    J0: float
    status: str
    history: List[Dict] = field(default_factory=list)
    evaluations: List[Dict] = field(default_factory=list)

    @property
    def ratio(self) -> float:
        return self.J / self.J0 if self.J0 else float("nan")


def _counts(problem) -> Tuple[int, int]:
    return int(getattr(problem, "j_calls", 0)), int(getattr(problem, "grad_calls", 0))


def _record(k: int, J: float, J0: float, g: Optional[np.ndarray], a: np.ndarray, problem) -> Dict:
    j_calls, grad_calls = _counts(problem)
    return {
        "k": k,
        "J": float(J),
        "J_over_J0": float(J / J0) if J0 else float("nan"),
        "grad_norm": float(np.linalg.norm(g)) if g is not None else float("nan"),
        "coefficients": [float(x) for x in a],
        "j_calls": j_calls,
        "grad_calls": grad_calls,
    }


def check_convergence(
    history: Sequence[Dict],
    xtol: float = 1e-8,
    ftol: float = 1e-8,
    gtol: float = 1e-6,
) -> Optional[str]:
    """Name of the first satisfied stopping rule, or None."""
    if not history:
        return None
    last = history[-1]
    if last["grad_norm"] < gtol:
        return "gradient"
    if len(history) < 2:
        return None
    prev = history[-2]
    a, b = np.asarray(last["coefficients"]), np.asarray(prev["coefficients"])
    scale = np.maximum(np.abs(b), np.finfo(float).tiny)
    if float(np.max(np.abs(a - b) / scale)) < xtol:
        return "step"
    if abs(last["J"] - prev["J"]) <= ftol * max(abs(prev["J"]), np.finfo(float).tiny):
        return "cost"
    return None


def two_loop(g: np.ndarray, pairs: Sequence[Tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """H g for the L-BFGS inverse Hessian built from (s, y) pairs, H0 = gamma I."""
    q = g.copy()
    alphas = []
    for s, y in reversed(pairs):
        rho = 1.0 / float(y @ s)
        alpha = rho * float(s @ q)
        q -= alpha * y
        alphas.append((rho, alpha))
    s, y = pairs[-1]
    r = (float(s @ y) / float(y @ y)) * q
    for (s, y), (rho, alpha) in zip(pairs, reversed(alphas)):
        beta = rho * float(y @ r)
        r += (alpha - beta) * s
    return r


def _check_finite(J, g=None):
    if not math.isfinite(J) or (g is not None and not np.all(np.isfinite(g))):
        raise OptimizationError(f"non-finite cost or gradient (J = {J})")


def lbfgs_minimize(problem, a0, settings: Optional[LbfgsSettings] = None, J0: Optional[float] = None) -> OptimizationResult:
    """Limited-memory BFGS with backtracking Armijo line search.

    `problem` needs cost(a) and gradient(a); gradient is called right after the
    accepted cost evaluation so a problem can reuse that forward run.
    """
    cfg = settings or LbfgsSettings()
    a = np.array(a0, dtype=float)
    J = float(problem.cost(a))
    g = np.asarray(problem.gradient(a), dtype=float)
    _check_finite(J, g)
    J0 = J if J0 is None else J0
    history = [_record(0, J, J0, g, a, problem)]
    recent: Deque[float] = deque([J], maxlen=cfg.relax_window)
    pairs: Deque[Tuple[np.ndarray, np.ndarray]] = deque(maxlen=cfg.memory)

    status = check_convergence(history, cfg.xtol, cfg.ftol, cfg.gtol)
    k = 0
    while status is None:
        if k >= cfg.max_iter:
            status = "max_iter"
            break
        k += 1
        gnorm = float(np.linalg.norm(g))
        d = -two_loop(g, pairs) if pairs else -g * min(1.0, 1.0 / gnorm)
        slope = float(g @ d)
        if slope >= 0:
            pairs.clear()
            d = -g * min(1.0, 1.0 / gnorm)
            slope = float(g @ d)

        reference = max(recent) if cfg.relax else J
        step = 1.0
        for _ in range(cfg.max_backtracks + 1):
            a_new = a + step * d
            J_new = float(problem.cost(a_new))
            _check_finite(J_new)
            if J_new <= reference + cfg.armijo * step * slope:
                break
            step *= cfg.shrink
        else:
            status = "line_search_failed"
            logger.warning("line search failed after %d backtracks at iteration %d", cfg.max_backtracks, k)
            break

        g_new = np.asarray(problem.gradient(a_new), dtype=float)
        _check_finite(J_new, g_new)
        s, y = a_new - a, g_new - g
        if float(s @ y) > 0:
            pairs.append((s, y))
        else:
            pairs.clear()
        a, J, g = a_new, J_new, g_new
        recent.append(J)
        history.append(_record(k, J, J0, g, a, problem))
        logger.info("lbfgs k=%d J=%.6e J/J0=%.3e |g|=%.3e step=%.3g", k, J, J / J0 if J0 else float("nan"), float(np.linalg.norm(g)), step)
        status = check_convergence(history, cfg.xtol, cfg.ftol, cfg.gtol)

    return OptimizationResult(coefficients=a, J=J, J0=J0, status=status, history=history)


@dataclass(frozen=True)
class SwarmSettings:
    swarm_size: int = 30
    max_evals: int = 1000
    c1: float = 2.0
    c2: float = 2.0
    velocity_fraction: float = 0.2
    sigma_max: float = 1.0
    sigma_min: float = 0.1
    seed: int = 0


EVOLUTIONARY_STATES = ("convergence", "exploitation", "exploration", "jumping-out")


def evolutionary_state(positions: np.ndarray, best_index: int) -> Tuple[str, float]:
    """Classify the swarm from the evolutionary factor f in [0, 1].

    f compares the mean distance of the best particle to the others with the
    extremes over the swarm.
    """
    n = positions.shape[0]
    if n < 2:
        return "convergence", 0.0
    diff = positions[:, None, :] - positions[None, :, :]
    mean_dist = np.sqrt((diff ** 2).sum(axis=-1)).sum(axis=1) / (n - 1)
    lo, hi = float(mean_dist.min()), float(mean_dist.max())
    f = 0.0 if hi - lo <= 0 else (float(mean_dist[best_index]) - lo) / (hi - lo)
    return EVOLUTIONARY_STATES[min(int(f / 0.25), 3)], f


def _adapt_coefficients(c1: float, c2: float, state: str, rng: np.random.Generator) -> Tuple[float, float]:
    delta = rng.uniform(0.05, 0.1)
    step = {
        "exploration": (delta, -delta),
        "exploitation": (0.5 * delta, -0.5 * delta),
        "convergence": (0.5 * delta, 0.5 * delta),
        "jumping-out": (-delta, delta),
    }[state]
    c1 = float(np.clip(c1 + step[0], 1.5, 2.5))
    c2 = float(np.clip(c2 + step[1], 1.5, 2.5))
    total = c1 + c2
    if total > 4.0:
        c1, c2 = 4.0 * c1 / total, 4.0 * c2 / total
    return c1, c2


def pso_minimize(
    cost_batch: Callable[[Sequence[np.ndarray]], List[float]],
    bounds: Tuple[Sequence[float], Sequence[float]],
    settings: Optional[SwarmSettings] = None,
    J0: Optional[float] = None,
) -> OptimizationResult:
    """Adaptive particle swarm: inertia and acceleration follow the evolutionary state,
    and the jumping-out state kicks the global best with a Gaussian perturbation.

    The state is a crisp classification of the evolutionary factor into four equal
    intervals (see `evolutionary_state`), a simplification of fuzzy membership with
    overlapping states: no transition rule picks between two plausible states.
    """
    cfg = settings or SwarmSettings()
    lo = np.asarray(bounds[0], dtype=float)
    hi = np.asarray(bounds[1], dtype=float)
    if lo.shape != hi.shape or np.any(hi <= lo):
        raise DomainError("PSO bounds need matching shapes and hi > lo")
    span = hi - lo
    vmax = cfg.velocity_fraction * span
    rng = np.random.default_rng(cfg.seed)
    n = max(1, min(cfg.swarm_size, cfg.max_evals))

    x = lo + rng.random((n, lo.size)) * span
    vel = rng.uniform(-vmax, vmax, size=(n, lo.size))
    evaluations: List[Dict] = []
    history: List[Dict] = []

    def evaluate(points: np.ndarray, state: str) -> np.ndarray:
        values = np.asarray(cost_batch(list(points)), dtype=float)
        for value in values:
            best_so_far = min(evaluations[-1]["best"], float(value)) if evaluations else float(value)
            evaluations.append({"eval": len(evaluations) + 1, "J": float(value), "best": best_so_far, "state": state})
        return values

    fx = evaluate(x, "init")
    pbest, pbest_f = x.copy(), fx.copy()
    g = int(np.argmin(pbest_f))
    gbest, gbest_f = pbest[g].copy(), float(pbest_f[g])
    J0 = float(fx[0]) if J0 is None else J0
    c1, c2 = cfg.c1, cfg.c2
    generation = 0
    history.append({"k": 0, "J": gbest_f, "J_over_J0": gbest_f / J0 if J0 else float("nan"), "state": "init",
                    "f": float("nan"), "coefficients": [float(v) for v in gbest], "j_calls": len(evaluations)})

    while len(evaluations) < cfg.max_evals:
        generation += 1
        state, f = evolutionary_state(x, int(np.argmin(pbest_f)))
        inertia = 1.0 / (1.0 + 1.5 * math.exp(-2.6 * f))
        c1, c2 = _adapt_coefficients(c1, c2, state, rng)

        if state == "jumping-out":
            sigma = cfg.sigma_max - (cfg.sigma_max - cfg.sigma_min) * len(evaluations) / cfg.max_evals
            kicked = gbest.copy()
            dim = rng.integers(lo.size)
            kicked[dim] = np.clip(kicked[dim] + span[dim] * rng.normal(0.0, sigma), lo[dim], hi[dim])
            value = float(evaluate(kicked[None, :], state)[0])
            if value < gbest_f:
                gbest, gbest_f = kicked, value
            else:
                worst = int(np.argmax(pbest_f))
                x[worst], pbest[worst], pbest_f[worst] = kicked, kicked, value
            if len(evaluations) >= cfg.max_evals:
                break

        r1 = rng.random(x.shape)
        r2 = rng.random(x.shape)
        vel = inertia * vel + c1 * r1 * (pbest - x) + c2 * r2 * (gbest - x)
        vel = np.clip(vel, -vmax, vmax)
        x = np.clip(x + vel, lo, hi)

        budget = cfg.max_evals - len(evaluations)
        active = min(budget, n)
        fx = evaluate(x[:active], state)
        better = fx < pbest_f[:active]
        pbest[:active][better] = x[:active][better]
        pbest_f[:active][better] = fx[better]
        g = int(np.argmin(pbest_f))
        if pbest_f[g] < gbest_f:
            gbest, gbest_f = pbest[g].copy(), float(pbest_f[g])

        history.append({"k": generation, "J": gbest_f, "J_over_J0": gbest_f / J0 if J0 else float("nan"),
                        "state": state, "f": f, "coefficients": [float(v) for v in gbest], "j_calls": len(evaluations)})
        logger.debug("pso gen=%d state=%s f=%.3f best=%.6e", generation, state, f, gbest_f)

    return OptimizationResult(
        coefficients=gbest, J=gbest_f, J0=J0, status="budget", history=history, evaluations=evaluations
    )


def fd_gradient(problem, a, step: float = 1e-4) -> np.ndarray:
    """Central differences of the cost, one coefficient at a time."""
    if step <= 0:
        raise DomainError(f"finite-difference step must be positive, got {step}")
    a = np.asarray(a, dtype=float)
    points = []
    for i in range(a.size):
        e = np.zeros_like(a)
        e[i] = step
        points += [a + e, a - e]
    batch = getattr(problem, "cost_batch", None)
    values = batch(points) if batch else [problem.cost(p) for p in points]
    values = np.asarray(values).reshape(a.size, 2)
    return (values[:, 0] - values[:, 1]) / (2 * step)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0 or nb == 0:
        return float("nan")
    return float(a @ b / (na * nb))
