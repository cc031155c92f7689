"""Run configuration: INI sections validated by pydantic models."""
from __future__ import annotations

import configparser
import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from Models.state import CostWeights, ExtensionSettings, Grid, PhysicalParams
from Services.adjoint import AdjointOptions
from Services.basis import Basis
from Services.errors import ConfigError
from Services.forward import ForwardOptions
from Services.optimize import LbfgsSettings, SwarmSettings
from Services.persist import config_digest

PROFILES: Dict[str, Dict[str, Dict[str, Any]]] = {
    "desk": {"grid": {"nx": 128, "ny": 32, "aspect_ratio": 4.0}, "time": {"dt": 2e-4, "t_final": 0.2}},
    "paper": {"grid": {"nx": 256, "ny": 64, "aspect_ratio": 4.0}, "time": {"dt": 2.5e-5, "t_final": 0.4}},
}


def _split_floats(value):
    if isinstance(value, str):
        return [float(v) for v in value.replace(";", ",").split(",") if v.strip()]
    return value


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PhysicsSection(_Section):
    Ra: float = Field(1e5, ge=0)
    Pr: float = Field(1.0, gt=0)
    St: float = Field(1.0, gt=0)
    T_b: float = 0.7
    T_M: float = 0.0
    h0: float = Field(0.05, gt=0, lt=1)

    @model_validator(mode="after")
    def _ordering(self):
        if not self.T_M < self.T_b:
            raise ValueError("T_M must be below T_b")
        return self


class GridSection(_Section):
    nx: Optional[int] = Field(None, gt=0)
    ny: int = Field(32, gt=0)
    aspect_ratio: float = Field(4.0, gt=0)

    @model_validator(mode="after")
    def _square_cells(self):
        expected = self.aspect_ratio * self.ny
        if self.nx is None:
            if abs(expected - round(expected)) > 1e-9:
                raise ValueError(f"aspect_ratio*ny = {expected} is not an integer")
            self.nx = int(round(expected))
        elif abs(self.nx - expected) > 1e-9:
            raise ValueError(f"nx must equal aspect_ratio*ny = {expected}, got {self.nx}")
        return self


class TimeSection(_Section):
    dt: float = Field(2e-4, gt=0)
    t_final: float = Field(0.2, gt=0)


class LevelsetSection(_Section):
    nb_width: int = Field(8, ge=4)
    pseudo_time_ratio: float = Field(0.45, gt=0, le=0.5)
    tolerance: float = Field(1e-10, gt=0)
    converge_extension: bool = False
    reinit_every: int = Field(5, ge=0)


class ControlSection(_Section):
    basis: Literal["tanh_basis", "trig_power_basis"] = "tanh_basis"
    coefficients: List[float] = Field(default_factory=list)

    _split = field_validator("coefficients", mode="before")(_split_floats)


class CostSection(_Section):
    beta1: float = Field(1.0, ge=0)
    beta2: float = Field(1.0, ge=0)
    beta3: float = Field(1e-3, gt=0)
    psi_terminal: Literal["displayed", "difference"] = "displayed"
    adjoint_walls: Literal["transpose", "insulated"] = "transpose"


class OptimizerSection(_Section):
    method: Literal["lbfgs", "pso"] = "lbfgs"
    memory: int = Field(10, ge=1)
    max_iterations: int = Field(25, ge=1)
    step_tol: float = Field(1e-8, gt=0)
    cost_tol: float = Field(1e-8, gt=0)
    grad_tol: float = Field(1e-6, gt=0)
    relax_cost: bool = False
    armijo: float = Field(1e-4, gt=0, lt=1)
    backtrack_factor: float = Field(0.5, gt=0, lt=1)
    max_backtracks: int = Field(20, ge=1)
    fd_step: float = Field(1e-4, gt=0)
    gradient_mode: Literal["chain", "fit"] = "chain"
    workers: int = Field(1, ge=1)


class PsoSection(_Section):
    swarm_size: int = Field(30, ge=1)
    max_evals: int = Field(1000, ge=1)
    lower: List[float] = Field(default_factory=list)
    upper: List[float] = Field(default_factory=list)

    _split = field_validator("lower", "upper", mode="before")(_split_floats)


class TargetSection(_Section):
    coefficients: Optional[List[float]] = None
    constant: Optional[float] = None

    _split = field_validator("coefficients", mode="before")(_split_floats)

    @model_validator(mode="after")
    def _one_kind(self):
        if self.coefficients is not None and self.constant is not None:
            raise ValueError("give either target coefficients or a constant wall value, not both")
        if self.constant is not None and self.constant >= 0:
            raise ValueError("target constant wall temperature must be below T_M = 0")
        return self

    @property
    def defined(self) -> bool:
        return self.coefficients is not None or self.constant is not None


class DesiredSection(_Section):
    temperature: Optional[str] = None
    levelset: Optional[str] = None

    @property
    def defined(self) -> bool:
        return bool(self.temperature and self.levelset)


class OutputSection(_Section):
    directory: str = "results"
    snapshot_every: int = Field(0, ge=0)
    checkpoint_budget_mb: float = Field(512.0, gt=0)


class SweepSection(_Section):
    Ra: List[float] = Field(default_factory=lambda: [1e4, 4e4, 8e4, 1e5])

    _split = field_validator("Ra", mode="before")(_split_floats)


class RunSection(_Section):
    name: Optional[str] = None
    seed: int = 0
    profile: Optional[Literal["desk", "paper"]] = None
    perturbation: float = Field(0.0, ge=0)


class RunConfig(_Section):
    physics: PhysicsSection = Field(default_factory=PhysicsSection)
    grid: GridSection = Field(default_factory=GridSection)
    time: TimeSection = Field(default_factory=TimeSection)
    levelset: LevelsetSection = Field(default_factory=LevelsetSection)
    control: ControlSection = Field(default_factory=ControlSection)
    cost: CostSection = Field(default_factory=CostSection)
    optimizer: OptimizerSection = Field(default_factory=OptimizerSection)
    pso: PsoSection = Field(default_factory=PsoSection)
    target: TargetSection = Field(default_factory=TargetSection)
    desired: DesiredSection = Field(default_factory=DesiredSection)
    output: OutputSection = Field(default_factory=OutputSection)
    sweep: SweepSection = Field(default_factory=SweepSection)
    run: RunSection = Field(default_factory=RunSection)

    def physical_params(self) -> PhysicalParams:
        return PhysicalParams(**self.physics.model_dump())

    def make_grid(self) -> Grid:
        return Grid(nx=self.grid.nx, ny=self.grid.ny, aspect_ratio=self.grid.aspect_ratio)

    def extension(self) -> ExtensionSettings:
        ls = self.levelset
        return ExtensionSettings(
            pseudo_time_ratio=ls.pseudo_time_ratio,
            nb_width=ls.nb_width,
            tolerance=ls.tolerance,
            converge=ls.converge_extension,
        )

    def weights(self) -> CostWeights:
        return CostWeights(beta1=self.cost.beta1, beta2=self.cost.beta2, beta3=self.cost.beta3)

    def make_basis(self) -> Basis:
        return Basis(self.control.basis)

    def forward_options(self, progress: bool = False, spill_dir: Optional[Path] = None) -> ForwardOptions:
        return ForwardOptions(
            extension=self.extension(),
            reinit_every=self.levelset.reinit_every,
            checkpoint_budget_mb=self.output.checkpoint_budget_mb,
            spill_dir=spill_dir,
            perturbation=self.run.perturbation,
            seed=self.run.seed,
            progress=progress,
        )

    def adjoint_options(self, progress: bool = False) -> AdjointOptions:
        return AdjointOptions(
            psi_terminal=self.cost.psi_terminal,
            walls=self.cost.adjoint_walls,
            extension=self.extension(),
            progress=progress,
        )

    def lbfgs_settings(self) -> LbfgsSettings:
        opt = self.optimizer
        return LbfgsSettings(
            memory=opt.memory,
            max_iter=opt.max_iterations,
            armijo=opt.armijo,
            shrink=opt.backtrack_factor,
            max_backtracks=opt.max_backtracks,
            xtol=opt.step_tol,
            ftol=opt.cost_tol,
            gtol=opt.grad_tol,
            relax=opt.relax_cost,
        )

    def swarm_settings(self) -> SwarmSettings:
        return SwarmSettings(swarm_size=self.pso.swarm_size, max_evals=self.pso.max_evals, seed=self.run.seed)

    def pso_bounds(self):
        dim = self.make_basis().dimension
        lower = self.pso.lower or [-1.0] * dim
        upper = self.pso.upper or [0.0] * dim
        if len(lower) != dim or len(upper) != dim:
            raise ConfigError(f"[pso] bounds need {dim} entries for {self.control.basis}")
        return lower, upper

    def initial_coefficients(self):
        dim = self.make_basis().dimension
        coeffs = self.control.coefficients or [-0.1] + [0.0] * (dim - 1)
        if len(coeffs) != dim:
            raise ConfigError(f"[control] coefficients need {dim} entries for {self.control.basis}, got {len(coeffs)}")
        return coeffs

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return config_digest(self.canonical_json())


def apply_profile(sections: Dict[str, Dict[str, Any]], profile: str) -> Dict[str, Dict[str, Any]]:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
    merged = {name: dict(values) for name, values in sections.items()}
    for name, values in PROFILES[profile].items():
        merged.setdefault(name, {}).update(values)
    return merged


def read_sections(path: Path) -> Dict[str, Dict[str, Any]]:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return {section: dict(parser.items(section)) for section in parser.sections()}


def build_config(
    sections: Dict[str, Dict[str, Any]],
    profile: Optional[str] = None,
    overrides: Optional[Dict[str, Dict[str, Any]]] = None,
) -> RunConfig:
    """Validate raw sections; a profile overlays [grid]/[time], overrides come last."""
    unknown = set(sections) - set(RunConfig.model_fields)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    profile = profile or sections.get("run", {}).get("profile")
    if profile:
        sections = apply_profile(sections, profile)
        sections.setdefault("run", {})["profile"] = profile
    for name, values in (overrides or {}).items():
        sections.setdefault(name, {}).update({k: v for k, v in values.items() if v is not None})
    try:
        return RunConfig.model_validate(sections)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration:\n{exc}") from exc


def load_config(
    path: Path,
    profile: Optional[str] = None,
    overrides: Optional[Dict[str, Dict[str, Any]]] = None,
) -> RunConfig:
    return build_config(read_sections(Path(path)), profile, overrides)
