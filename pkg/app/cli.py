"""rbmelt command line: forward, sweep, gradcheck, optimize, compare, plotdata."""
from __future__ import annotations

import functools
import logging
import sys
from pathlib import Path

import click

from app import settings
from app.services.campaign import cmd_compare, cmd_forward, cmd_gradcheck, cmd_optimize, cmd_sweep
from app.services.plotdata import cmd_plotdata
from Models.config import load_config
from Services.errors import DomainError, SolverError

logger = logging.getLogger("rbmelt")

EXIT_RUNTIME = 1
EXIT_INPUT = 2


def _guarded(fn):
    """Map invalid input to exit 2 and numerical failures to exit 1."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        ctx = click.get_current_context()
        try:
            return fn(*args, **kwargs)
        except (DomainError, FileNotFoundError) as exc:
            click.echo(f"error: {exc}", err=True)
            ctx.exit(EXIT_INPUT)
        except SolverError as exc:
            click.echo(f"solver failure: {exc}", err=True)
            ctx.exit(EXIT_RUNTIME)

    return wrapper


def run_options(fn):
    fn = click.option("--profile", type=click.Choice(["desk", "paper"]), default=None, help="Grid/time preset.")(fn)
    fn = click.option("--seed", type=int, default=None, help="Random seed (PSO, perturbation).")(fn)
    fn = click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=None, help="Output root.")(fn)
    fn = click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False, path_type=Path))(fn)
    return fn


def _load(config_path: Path, profile, seed, out):
    overrides = {"run": {"seed": seed}, "output": {"directory": str(out) if out else None}}
    return load_config(config_path, profile=profile, overrides=overrides)


@click.group()
@click.option("--log-level", default=None, help="Logging level (default from RBMELT_LOG_LEVEL).")
@click.option("--progress/--no-progress", default=None, help="Progress bars (default: on for a terminal).")
@click.pass_context
def cli(ctx, log_level, progress):
    """Rayleigh-Benard melting simulations and wall-temperature optimization."""
    logging.basicConfig(
        level=(log_level or settings.LOG_LEVEL).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    ctx.ensure_object(dict)
    ctx.obj["progress"] = sys.stderr.isatty() if progress is None else progress


@cli.command()
@run_options
@click.pass_context
@_guarded
def forward(ctx, config_path, profile, seed, out):
    """Run one forward simulation and write diagnostics and snapshots."""
    cfg = _load(config_path, profile, seed, out)
    manifest = cmd_forward(cfg, progress=ctx.obj["progress"])
    click.echo(str(manifest.directory))


@cli.command()
@run_options
@click.pass_context
@_guarded
def sweep(ctx, config_path, profile, seed, out):
    """Forward runs over the [sweep] Rayleigh numbers."""
    cfg = _load(config_path, profile, seed, out)
    manifest = cmd_sweep(cfg, progress=ctx.obj["progress"])
    click.echo(str(manifest.directory))


@cli.command()
@run_options
@click.option("--workers", type=int, default=None, help="Processes for finite-difference costs.")
@_guarded
def gradcheck(config_path, profile, seed, out, workers):
    """Compare the adjoint gradient with finite differences."""
    cfg = _load(config_path, profile, seed, out)
    manifest = cmd_gradcheck(cfg, workers=workers or settings.WORKERS)
    counters = manifest.counters
    click.echo(f"cosine similarity {counters['cosine_similarity']:.6f}, max relative error {counters['max_relative_error']:.3e}")


@cli.command()
@run_options
@click.option("--method", type=click.Choice(["lbfgs", "pso"]), default=None)
@click.option("--workers", type=int, default=None, help="Processes for swarm evaluations.")
@click.pass_context
@_guarded
def optimize(ctx, config_path, profile, seed, out, method, workers):
    """Optimize the top-wall temperature coefficients."""
    cfg = _load(config_path, profile, seed, out)
    manifest = cmd_optimize(cfg, method=method, workers=workers or settings.WORKERS, progress=ctx.obj["progress"])
    counters = manifest.counters
    click.echo(f"{counters['method']}: {counters['status']} J/J0 = {counters['J_over_J0']:.6e} coefficients {counters['coefficients']}")


@cli.command()
@click.argument("lbfgs_dir", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.argument("pso_dir", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=Path("."))
@_guarded
def compare(lbfgs_dir, pso_dir, out):
    """Tabulate cost and gradient evaluations of an L-BFGS and a PSO campaign."""
    click.echo(str(cmd_compare(lbfgs_dir, pso_dir, out)))


@cli.command()
@click.argument("campaign", type=click.Path(file_okay=False, path_type=Path))
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=None)
@_guarded
def plotdata(campaign, out):
    """Consolidate a campaign into tidy (series, x, y) CSVs."""
    click.echo(str(cmd_plotdata(campaign, out)))


if __name__ == "__main__":
    cli()
