"""Run configuration: TOML file -> validated dataclasses with full defaults.

Defaults follow the published model constants; desk-scale experiment files
override resolution and chain length.  Unknown sections or keys are
rejected so stale configs fail loudly.
"""

from __future__ import annotations

import math
import sys
from dataclasses import asdict, dataclass, field, fields

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .cell import CellParams
from .geometry import GeometryParam
from .inference import Prior


@dataclass
class PhysicsConfig:
    tau_in: float = 0.3
    tau_out: float = 6.0
    tau_open: float = 120.0
    tau_close: float = 150.0
    v_gate: float = 0.13
    sigma_i: float = 0.174
    sigma_e: float = 0.625
    sigma_b: float = 1.0
    chi: float = 140.0
    cm: float = 0.01

    def cell_params(self) -> CellParams:
        return CellParams(self.tau_in, self.tau_out, self.tau_open, self.tau_close,
                          self.v_gate)

    def d_healthy(self) -> float:
        sigma = self.sigma_i * self.sigma_e / (self.sigma_i + self.sigma_e)
        return sigma / (self.chi * self.cm)


@dataclass
class DomainConfig:
    x0: float = 0.0
    y0: float = 0.0
    x1: float = 100.0
    y1: float = 100.0
    hole_center_x: float = 50.0
    hole_center_y: float = 50.0

    @property
    def bounds(self) -> tuple:
        return (self.x0, self.y0, self.x1, self.y1)

    @property
    def center(self) -> tuple:
        return (self.hole_center_x, self.hole_center_y)


@dataclass
class NumericsConfig:
    dx: float = 0.25
    dt: float = 0.5
    cg_tol: float = 1e-8
    dtau: float = 4.0


@dataclass
class ExperimentConfig:
    gamma: float = 0.8
    theta_true: list = field(default_factory=lambda: [10.0, 4.0, 0.0])
    t_experiment: float = 2000.0
    sigma2: float = 1e-6
    seed: int = 2024
    electrode_z: float = 0.0
    model_t_end: float = 0.0  # 0 -> use t_experiment


@dataclass
class PrepaceConfig:
    theta_ref: list = field(default_factory=lambda: [9.0, 9.0, 0.0])
    gamma: float = 0.8
    s1_region: list = field(default_factory=lambda: [0.0, 0.0, 2.0, 100.0])
    s1_time: float = 0.0
    s2_region: list = field(default_factory=lambda: [0.0, 0.0, 50.0, 50.0])
    s2_time: float = 460.0
    stim_duration: float = 2.0
    steady_tol: float = 2.0
    min_periods: int = 6
    max_duration: float = 12000.0
    check_interval: float = 500.0


@dataclass
class PriorConfig:
    a_min: float = 2.0
    a_max: float = 16.0
    b_min: float = 2.0
    b_max: float = 16.0
    phi_min: float = -math.pi / 2
    phi_max: float = math.pi / 2

    def prior(self) -> Prior:
        return Prior(self.a_min, self.a_max, self.b_min, self.b_max,
                     self.phi_min, self.phi_max)


@dataclass
class NoiseConfig:
    mode: str = "eps_plus_d"  # eps_plus_d | eps_only | custom
    custom_diag: list = field(default_factory=list)  # 1 or 21 entries
    sigma_d_inflation: float = 1.3
    sigma_d_half_width: float = 0.5
    sigma_d_step: float = 0.02


@dataclass
class SamplerConfig:
    n_iterations: int = 500
    sigma0_diag: list = field(default_factory=lambda: [0.0025, 0.0025, 0.0001])
    l0: int = 100
    s_d: float = 1.152
    epsilon: float = 1e-4
    mode: str = "adaptive"  # adaptive | random_walk
    strategy: str = "relocation"  # relocation | independent
    theta0: list = field(default_factory=list)  # empty -> prior midpoint
    checkpoint_every: int = 100
    active: list = field(default_factory=lambda: [True, True, True])


@dataclass
class PathsConfig:
    out_dir: str = "out"
    snapshot: str = "snapshot.mvsnap"
    traces: str = "traces.csv"
    traces_meta: str = "traces.json"
    sigma_d: str = "sigma_d.json"
    chain_dir: str = "chain"
    diagnostics_dir: str = "diagnostics"


_SECTIONS = {
    "physics": PhysicsConfig,
    "domain": DomainConfig,
    "numerics": NumericsConfig,
    "experiment": ExperimentConfig,
    "prepace": PrepaceConfig,
    "prior": PriorConfig,
    "noise": NoiseConfig,
    "sampler": SamplerConfig,
    "paths": PathsConfig,
}


@dataclass
class RunConfig:
    physics: PhysicsConfig = field(default_factory=PhysicsConfig)
    domain: DomainConfig = field(default_factory=DomainConfig)
    numerics: NumericsConfig = field(default_factory=NumericsConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    prepace: PrepaceConfig = field(default_factory=PrepaceConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def theta_true(self) -> GeometryParam:
        a, b, phi = self.experiment.theta_true
        return GeometryParam(a, b, phi, self.domain.center)

    def theta_ref(self) -> GeometryParam:
        a, b, phi = self.prepace.theta_ref
        return GeometryParam(a, b, phi, self.domain.center)

    def model_t_end(self) -> float:
        return self.experiment.model_t_end or self.experiment.t_experiment


class ConfigError(ValueError):
    pass


def _coerce(section_name: str, cls, data: dict):
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key '{key}' in section [{section_name}]")
    obj = cls()
    for key, value in data.items():
        default = getattr(obj, key)
        if isinstance(default, bool):
            value = bool(value)
        elif isinstance(default, int) and not isinstance(value, bool):
            if isinstance(value, float) and value != int(value):
                raise ConfigError(f"[{section_name}] {key} must be an integer")
            value = int(value)
        elif isinstance(default, float):
            value = float(value)
        elif isinstance(default, list) and not isinstance(value, list):
            raise ConfigError(f"[{section_name}] {key} must be a list")
        setattr(obj, key, value)
    return obj


def load_config(path=None) -> RunConfig:
    data = {}
    if path is not None:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    for section in data:
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        if not isinstance(data[section], dict):
            raise ConfigError(f"section [{section}] must be a table")
    cfg = RunConfig(**{name: _coerce(name, cls, data.get(name, {}))
                       for name, cls in _SECTIONS.items()})
    validate(cfg)
    return cfg


def validate(cfg: RunConfig):
    if cfg.numerics.dx <= 0 or cfg.numerics.dt <= 0:
        raise ConfigError("dx and dt must be positive")
    ratio = cfg.numerics.dtau / cfg.numerics.dt
    if abs(ratio - round(ratio)) > 1e-9:
        raise ConfigError("dt must divide dtau evenly")
    if len(cfg.experiment.theta_true) != 3:
        raise ConfigError("theta_true must have three entries")
    if cfg.noise.mode not in ("eps_plus_d", "eps_only", "custom"):
        raise ConfigError(f"unknown noise mode '{cfg.noise.mode}'")
    if cfg.noise.mode == "custom" and len(cfg.noise.custom_diag) not in (1, 21):
        raise ConfigError("custom_diag needs 1 or 21 entries")
    if cfg.sampler.mode not in ("adaptive", "random_walk"):
        raise ConfigError(f"unknown sampler mode '{cfg.sampler.mode}'")
    if cfg.sampler.strategy not in ("relocation", "independent"):
        raise ConfigError(f"unknown meshing strategy '{cfg.sampler.strategy}'")
    if len(cfg.sampler.sigma0_diag) != 3:
        raise ConfigError("sigma0_diag must have three entries")
    if cfg.sampler.theta0 and len(cfg.sampler.theta0) != 3:
        raise ConfigError("theta0 must have three entries")


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return f'"{v}"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_format_value(x) for x in v) + "]"
    raise TypeError(f"cannot format {type(v)}")


def format_config(cfg: RunConfig) -> str:
    """Resolved configuration, defaults included, as a TOML document."""
    lines = []
    for name in _SECTIONS:
        lines.append(f"[{name}]")
        for key, value in asdict(getattr(cfg, name)).items():
            lines.append(f"{key} = {_format_value(value)}")
        lines.append("")
    return "\n".join(lines)
