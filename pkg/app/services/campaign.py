"""Campaign drivers behind the CLI: forward runs, sweeps, gradient checks and optimizations.

Each driver writes into its own directory under the output root and finishes
with a manifest.json naming every artifact it produced.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from Models.config import RunConfig
from Models.state import DesiredState, Trajectory
from Services.errors import ConfigError, DomainError, SolverError
from Services.forward import detect_onset, run_forward, vorticity
from Services.optimize import (
    ControlProblem,
    OptimizationResult,
    cosine_similarity,
    fd_gradient,
    lbfgs_minimize,
    pso_minimize,
)
from Services.persist import (
    CampaignManifest,
    read_manifest,
    read_snapshot,
    read_table,
    snapshot_name,
    write_snapshot,
    write_table,
)

logger = logging.getLogger(__name__)

DIAGNOSTIC_COLUMNS = [
    "t", "h_bar", "Ra_e", "max_u", "melted_volume", "front_deviation",
    "convection_cells", "enthalpy", "wall_heat_flux", "onset",
]


def campaign_dir(cfg: RunConfig, kind: str, out: Optional[Path] = None) -> Path:
    root = Path(out) if out else Path(cfg.output.directory)
    if not cfg.run.name:
        return root / f"{kind}-{cfg.config_hash()[:10]}"
    # one config drives both optimizers
    if kind.startswith("optimize-"):
        return root / f"{cfg.run.name}-{kind[len('optimize-'):]}"
    return root / cfg.run.name


def open_manifest(cfg: RunConfig, kind: str, directory: Path) -> CampaignManifest:
    directory.mkdir(parents=True, exist_ok=True)
    logger.info("%s campaign in %s", kind, directory)
    manifest = CampaignManifest(
        directory=directory, kind=kind, config=cfg.model_dump(mode="json"), config_hash=cfg.config_hash()
    )
    manifest.write()
    return manifest


def diagnostics_frame(traj: Trajectory) -> pd.DataFrame:
    df = pd.DataFrame(traj.diagnostics)
    onset = detect_onset(traj.diagnostics)
    df["onset"] = (df["t"] >= onset) if onset is not None else False
    return df.reindex(columns=DIAGNOSTIC_COLUMNS)


def write_fields(manifest: CampaignManifest, traj: Trajectory, index: int, prefix: str = "") -> None:
    cp = traj.checkpoints[index]
    grid = traj.grid
    fields = {"T": cp.T, "phi": cp.phi, "vorticity": vorticity(cp.u, cp.v, grid)}
    for name, values in fields.items():
        label = f"{prefix}{name}"
        path = manifest.directory / "snapshots" / snapshot_name(label, cp.index)
        manifest.add(f"snapshot:{label}:{cp.index}", write_snapshot(path, values, grid, cp.time, label))


def write_trajectory(manifest: CampaignManifest, traj: Trajectory, every: int) -> None:
    manifest.add("diagnostics", write_table(manifest.directory / "diagnostics.csv", diagnostics_frame(traj)))
    n = traj.n_steps
    levels = sorted(set(range(0, n + 1, every)) | {n}) if every > 0 else [n]
    for k in levels:
        write_fields(manifest, traj, k)
    onset = detect_onset(traj.diagnostics)
    manifest.counters.update(
        steps=n,
        final_time=float(traj.final.time),
        stopped_early=bool(traj.stopped_early),
        onset_time=onset,
        spilled_checkpoints=int(getattr(traj.checkpoints, "spilled", 0)),
    )


def _wall_for(cfg: RunConfig, coefficients: Sequence[float]) -> np.ndarray:
    return cfg.make_basis().wall(coefficients, cfg.make_grid(), cfg.physics.T_M)


def _simulate(cfg: RunConfig, w: np.ndarray, progress: bool = False) -> Trajectory:
    return run_forward(
        w, cfg.physical_params(), cfg.make_grid(), cfg.time.t_final, cfg.time.dt, cfg.forward_options(progress)
    )


def cmd_forward(cfg: RunConfig, out: Optional[Path] = None, progress: bool = False) -> CampaignManifest:
    manifest = open_manifest(cfg, "forward", campaign_dir(cfg, "forward", out))
    w = _wall_for(cfg, cfg.initial_coefficients())
    try:
        traj = _simulate(cfg, w, progress)
    except SolverError as exc:
        manifest.counters["error"] = str(exc)
        manifest.write("failed")
        raise
    write_trajectory(manifest, traj, cfg.output.snapshot_every)
    manifest.write("completed")
    return manifest


def cmd_sweep(cfg: RunConfig, out: Optional[Path] = None, progress: bool = False) -> CampaignManifest:
    """One forward campaign per Rayleigh number; the sweep manifest points at each."""
    directory = campaign_dir(cfg, "sweep", out)
    manifest = open_manifest(cfg, "sweep", directory)
    for Ra in cfg.sweep.Ra:
        physics = cfg.physics.model_copy(update={"Ra": float(Ra)})
        run = cfg.run.model_copy(update={"name": f"Ra{Ra:.3g}"})
        sub = cfg.model_copy(update={"physics": physics, "run": run})
        child = cmd_forward(sub, directory, progress)
        manifest.add(f"campaign:{sub.config_hash()[:10]}", child.directory / "manifest.json")
        manifest.counters.setdefault("Ra", {})[sub.config_hash()[:10]] = float(Ra)
    manifest.write("completed")
    return manifest


def desired_state(cfg: RunConfig, manifest: Optional[CampaignManifest] = None, progress: bool = False) -> DesiredState:
    """Load T_d/phi_d snapshots, or generate them from the [target] control."""
    grid = cfg.make_grid()
    if cfg.desired.defined:
        _, T_d = read_snapshot(cfg.desired.temperature)
        _, phi_d = read_snapshot(cfg.desired.levelset)
        return DesiredState(grid, T_d, phi_d)
    if not cfg.target.defined:
        raise ConfigError("no desired state: give [desired] temperature/levelset files or a [target] block")

    if cfg.target.constant is not None:
        w = np.full(grid.nx, cfg.target.constant)
    else:
        w = _wall_for(cfg, cfg.target.coefficients)
    logger.info("generating desired state from the target control")
    traj = _simulate(cfg, w, progress)
    final = traj.final
    if manifest is not None:
        for name, values in (("T_desired", final.T), ("phi_desired", final.phi)):
            path = write_snapshot(manifest.directory / "desired" / f"{name}.dat", values, grid, final.time, name)
            manifest.add(name, path)
        write_table(manifest.directory / "desired" / "target_diagnostics.csv", diagnostics_frame(traj))
        manifest.add("target_diagnostics", manifest.directory / "desired" / "target_diagnostics.csv")
    return DesiredState(grid, final.T.copy(), final.phi.copy())


def control_problem(cfg: RunConfig, desired: DesiredState, workers: Optional[int] = None) -> ControlProblem:
    return ControlProblem(
        params=cfg.physical_params(),
        grid=cfg.make_grid(),
        t_f=cfg.time.t_final,
        dt=cfg.time.dt,
        basis=cfg.make_basis(),
        desired=desired,
        weights=cfg.weights(),
        forward=cfg.forward_options(),
        adjoint=cfg.adjoint_options(),
        gradient_mode=cfg.optimizer.gradient_mode,
        workers=workers or cfg.optimizer.workers,
    )


def cmd_gradcheck(cfg: RunConfig, out: Optional[Path] = None, workers: Optional[int] = None) -> CampaignManifest:
    """Adjoint gradient against central finite differences at the initial coefficients."""
    manifest = open_manifest(cfg, "gradcheck", campaign_dir(cfg, "gradcheck", out))
    desired = desired_state(cfg, manifest)
    problem = control_problem(cfg, desired, workers)
    a = np.asarray(cfg.initial_coefficients(), dtype=float)
    try:
        J, adjoint = problem.value_and_gradient(a)
        fd = fd_gradient(problem, a, cfg.optimizer.fd_step)
    except SolverError as exc:
        manifest.counters["error"] = str(exc)
        manifest.write("failed")
        raise

    scale = np.maximum(np.abs(fd), 1e-12)
    rows = [
        {"index": i, "adjoint": adjoint[i], "fd": fd[i], "relative_error": abs(adjoint[i] - fd[i]) / scale[i]}
        for i in range(a.size)
    ]
    manifest.add("gradient", write_table(manifest.directory / "gradient.csv", rows))
    cosine = cosine_similarity(adjoint, fd)
    manifest.counters.update(
        J=float(J), cosine_similarity=cosine, max_relative_error=float(max(r["relative_error"] for r in rows)),
        j_calls=problem.j_calls, grad_calls=problem.grad_calls,
    )
    logger.info("gradcheck: cosine similarity %.4f, max relative error %.3e", cosine, manifest.counters["max_relative_error"])
    manifest.write("completed")
    return manifest


def _expand_coefficients(rows: List[Dict]) -> pd.DataFrame:
    df = pd.DataFrame(rows)
    if "coefficients" in df:
        coeffs = pd.DataFrame(df.pop("coefficients").tolist()).add_prefix("a_")
        df = pd.concat([df, coeffs], axis=1)
    return df


def wall_theta_frame(problem: ControlProblem) -> pd.DataFrame:
    result = problem.last_adjoint
    n_steps, nx = result.wall_theta.shape
    x = problem.grid.x_centers
    return pd.DataFrame({
        "k": np.repeat(np.arange(n_steps), nx),
        "t": np.repeat(np.arange(n_steps) * result.dt, nx),
        "x": np.tile(x, n_steps),
        "wall_theta": result.wall_theta.reshape(-1),
    })


def front_history(optimized: Trajectory, reference: Trajectory) -> pd.DataFrame:
    """h_bar(t) of the optimized run next to the run with the initial guess."""
    opt = pd.DataFrame(optimized.diagnostics)[["t", "h_bar", "max_u"]]
    ref = pd.DataFrame(reference.diagnostics)[["t", "h_bar", "max_u"]]
    return opt.merge(ref, on="t", how="outer", suffixes=("_optimized", "_initial")).sort_values("t")


def _run_optimizer(cfg: RunConfig, problem: ControlProblem, method: str, a0: np.ndarray) -> OptimizationResult:
    if method == "lbfgs":
        return lbfgs_minimize(problem, a0, cfg.lbfgs_settings())
    if method == "pso":
        J0 = problem.cost(a0)
        return pso_minimize(problem.cost_batch, cfg.pso_bounds(), cfg.swarm_settings(), J0=J0)
    raise DomainError(f"unknown optimization method {method!r}")


def cmd_optimize(
    cfg: RunConfig,
    method: Optional[str] = None,
    out: Optional[Path] = None,
    workers: Optional[int] = None,
    progress: bool = False,
) -> CampaignManifest:
    method = method or cfg.optimizer.method
    manifest = open_manifest(cfg, f"optimize-{method}", campaign_dir(cfg, f"optimize-{method}", out))
    manifest.counters["method"] = method
    desired = desired_state(cfg, manifest, progress)
    problem = control_problem(cfg, desired, workers)
    a0 = np.asarray(cfg.initial_coefficients(), dtype=float)

    try:
        result = _run_optimizer(cfg, problem, method, a0)
    except SolverError as exc:
        manifest.counters.update(error=str(exc), j_calls=problem.j_calls, grad_calls=problem.grad_calls)
        manifest.write("failed")
        raise

    directory = manifest.directory
    j_calls, grad_calls = problem.j_calls, problem.grad_calls
    manifest.add("history", write_table(directory / "history.csv", _expand_coefficients(result.history)))
    if result.evaluations:
        manifest.add("evaluations", write_table(directory / "evaluations.csv", result.evaluations))

    final = problem.simulate(result.coefficients)
    write_fields(manifest, final, final.n_steps)
    manifest.add("final_diagnostics", write_table(directory / "final_diagnostics.csv", diagnostics_frame(final)))
    reference = problem.simulate(a0) if method == "pso" else _simulate(cfg, problem.wall(a0))
    manifest.add("front_history", write_table(directory / "front_history.csv", front_history(final, reference)))
    if method == "lbfgs":
        problem.gradient(result.coefficients)
        manifest.add("wall_theta", write_table(directory / "wall_theta.csv", wall_theta_frame(problem)))

    manifest.counters.update(
        status=result.status,
        J0=float(result.J0),
        J=float(result.J),
        J_over_J0=float(result.ratio),
        coefficients=[float(v) for v in result.coefficients],
        j_calls=j_calls,
        grad_calls=grad_calls,
        onset_optimized=detect_onset(final.diagnostics),
        onset_initial=detect_onset(reference.diagnostics),
    )
    logger.info("%s finished (%s): J/J0 = %.3e after %d J calls", method, result.status, result.ratio, manifest.counters["j_calls"])
    manifest.write("completed")
    return manifest


def _calls_to_reach(evaluations: pd.DataFrame, ratio: float, J0: float) -> Optional[int]:
    hit = evaluations.index[evaluations["best"] / J0 <= ratio]
    return int(evaluations.loc[hit[0], "eval"]) if len(hit) else None


def cmd_compare(lbfgs_dir: Path, pso_dir: Path, out: Path) -> Path:
    """Cost-evaluation table of a gradient and a swarm campaign."""
    rows = []
    lbfgs = read_manifest(lbfgs_dir)["counters"]
    pso = read_manifest(pso_dir)["counters"]
    for name, counters in (("lbfgs", lbfgs), ("pso", pso)):
        rows.append({
            "method": name,
            "J_calls": counters.get("j_calls"),
            "grad_calls": counters.get("grad_calls", 0),
            "J_final_over_J0": counters.get("J_over_J0"),
        })
    evaluations_path = Path(pso_dir) / "evaluations.csv"
    if evaluations_path.exists() and lbfgs.get("J_over_J0") is not None:
        evaluations = read_table(evaluations_path)
        rows[1]["J_calls_to_match_lbfgs"] = _calls_to_reach(evaluations, lbfgs["J_over_J0"], pso["J0"])
    rows[0]["J_calls_to_match_lbfgs"] = (lbfgs.get("j_calls") or 0) + (lbfgs.get("grad_calls") or 0)
    return write_table(Path(out) / "comparison.csv", rows)
