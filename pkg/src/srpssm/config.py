"""YAML experiment configuration, validated before any computation."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .detectors import DetectorConfig
from .lr_engine import PriorGrid
from .ssm_core import ChangeScenario, ModelError, ModelSpec


class ConfigError(ValueError):
    """Invalid configuration; ``path`` is the dotted key that failed."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelBlock(_Strict):
    family: Literal["iid_gaussian", "process_mean", "ar_mean_shift", "linear_gaussian"] = "iid_gaussian"
    alpha: float = 0.5
    sigma_eps: float = 1.0
    sigma_eta: float = 1.0
    coefs: list[float] = Field(default_factory=lambda: [0.5])
    sigma2: float = 1.0
    F: Optional[list[list[float]]] = None
    H: Optional[list[list[float]]] = None
    G: Optional[list[list[float]]] = None
    J: Optional[list[list[float]]] = None
    u: Optional[list[float]] = None
    Sigma1: Optional[list[list[float]]] = None
    Sigma2: Optional[list[list[float]]] = None
    binding: Optional[str] = None

    @model_validator(mode="after")
    def _linear_fields(self):
        if self.family == "linear_gaussian":
            missing = [k for k in ("F", "H", "Sigma1", "Sigma2", "binding") if getattr(self, k) is None]
            if missing:
                raise ValueError(f"linear_gaussian needs {', '.join(missing)}")
        return self

    def build(self) -> ModelSpec:
        if self.family == "iid_gaussian":
            return ModelSpec.iid_gaussian()
        if self.family == "process_mean":
            return ModelSpec.process_mean(self.alpha, self.sigma_eps, self.sigma_eta)
        if self.family == "ar_mean_shift":
            return ModelSpec.ar_mean_shift(self.coefs, self.sigma2)
        return ModelSpec.linear_gaussian(
            F=self.F, H=self.H, Sigma1=self.Sigma1, Sigma2=self.Sigma2, binding=self.binding, G=self.G, J=self.J, u=self.u
        )


class ScenarioBlock(_Strict):
    theta0: float = 0.0
    theta: float = 1.0
    omega: Optional[int] = 1  # null means no change

    def build(self) -> ChangeScenario:
        omega = math.inf if self.omega is None else self.omega
        return ChangeScenario(self.theta0, self.theta if math.isfinite(omega) else self.theta0, omega)


class PriorBlock(_Strict):
    lo: float = 0.5
    hi: float = 1.5
    density: Literal["uniform", "point"] = "uniform"
    nodes: int = Field(33, ge=1)

    def build(self, theta: float) -> PriorGrid:
        if self.density == "point":
            return PriorGrid.point(theta)
        return PriorGrid.gauss_legendre(self.lo, self.hi, self.nodes)


class DetectorBlock(_Strict):
    rule: Literal["weighted_srp", "sr_point", "cusum"] = "weighted_srp"
    b: list[float] = Field(default_factory=lambda: [4.0])
    init_mode: Literal["zero", "psi"] = "zero"
    q: float = 1.0
    max_steps: int = Field(1_000_000, ge=1)
    include_k0: bool = False
    psi_particles: int = Field(20_000, ge=1000)

    @field_validator("b")
    @classmethod
    def _positive(cls, v):
        if not v:
            raise ValueError("need at least one threshold")
        if any(not x > 0 for x in v):
            raise ValueError("thresholds must be > 0")
        return v


class HarnessBlock(_Strict):
    reps: int = Field(10_000, ge=100)
    seed: int = 0
    omegas: list[int] = Field(default_factory=lambda: [1, 2, 3, 5, 10, 20, 50])
    thetas: list[float] = Field(default_factory=lambda: [1.0])
    n_steps: int = Field(200, ge=1)
    horizon: Optional[int] = None


class AsymptoticsBlock(_Strict):
    kl_steps: int = Field(500, ge=1)
    kl_reps: int = Field(2000, ge=100)
    ladder_reps: int = Field(100_000, ge=100)
    gamma_reps: int = Field(10_000, ge=100)
    gamma_eps: float = Field(1e-8, gt=0, lt=1)
    lambda2_steps: int = Field(3000, ge=1000)
    lambda2_reps: int = Field(200, ge=100)


class OutputBlock(_Strict):
    dir: str = "results"
    formats: list[Literal["csv", "json"]] = Field(default_factory=lambda: ["csv", "json"])


class ExperimentConfig(_Strict):
    model: ModelBlock = Field(default_factory=ModelBlock)
    scenario: ScenarioBlock = Field(default_factory=ScenarioBlock)
    prior: PriorBlock = Field(default_factory=PriorBlock)
    detector: DetectorBlock = Field(default_factory=DetectorBlock)
    harness: HarnessBlock = Field(default_factory=HarnessBlock)
    asymptotics: AsymptoticsBlock = Field(default_factory=AsymptoticsBlock)
    output: OutputBlock = Field(default_factory=OutputBlock)

    def model_spec(self) -> ModelSpec:
        try:
            return self.model.build()
        except (ModelError, ValueError) as exc:
            raise ConfigError(str(exc), "model") from exc

    def grid(self) -> PriorGrid:
        try:
            return self.prior.build(self.scenario.theta)
        except ValueError as exc:
            raise ConfigError(str(exc), "prior") from exc

    def detector_config(self, b: float | None = None) -> DetectorConfig:
        d = self.detector
        rule = d.rule
        grid = self.grid()
        if rule in ("sr_point", "cusum") and grid.size != 1:
            grid = PriorGrid.point(self.scenario.theta)
        try:
            # psi-mode configs are created in zero mode; the caller attaches psi
            return DetectorConfig(
                b=d.b[0] if b is None else b, grid=grid, rule=rule, init_mode="zero",
                max_steps=d.max_steps, q=d.q, include_k0=d.include_k0,
            )
        except ValueError as exc:
            raise ConfigError(str(exc), "detector") from exc

    def scenario_obj(self) -> ChangeScenario:
        try:
            return self.scenario.build()
        except ValueError as exc:
            raise ConfigError(str(exc), "scenario") from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"YAML parse error: {exc}") from exc
    return parse_config(raw)


def parse_config(raw: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        err = exc.errors()[0]
        loc = ".".join(str(p) for p in err["loc"])
        raise ConfigError(err["msg"], loc) from exc
