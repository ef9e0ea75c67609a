"""Experiment configuration (TOML) and construction of pipeline objects."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import tomli
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from cctraj import ConfigurationError
from cctraj.conformal import TargetSamplerConfig
from cctraj.contraction import Metric, design_tvlqr, discrete_rate, normalize_into_bounds, riccati_pass
from cctraj.models import Model, make_model
from cctraj.noise import distribution_from_dict, substream
from cctraj.tightening import BallObstacle, ConstraintSpec


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Section):
    id: str = "dubins"
    dt: float = 0.05
    D: Optional[list[list[float]]] = None  # row-major rows

    @field_validator("dt")
    @classmethod
    def _dt(cls, v):
        if not v > 0:
            raise ValueError("dt must be positive")
        return v


class SamplerSection(_Section):
    frequencies: list[float] = [0.5, 1.0, 2.0, 3.0, 4.0]
    weight_std: list[float] = [0.5, 0.5]
    seed: int = 1000


class MetricSection(_Section):
    m_lo: float = 0.5
    m_hi: float = 10.0
    gamma: Optional[float] = 1.0
    lam: Optional[float] = Field(default=None, alias="lambda")
    source: Literal["identity", "diag", "matrix", "riccati"] = "identity"
    scale: float = 1.0
    diag: Optional[list[float]] = None
    matrix: Optional[list[list[float]]] = None


class ControllerSection(_Section):
    Q: list[float] = [1.0, 1.0, 1.0, 1.0]  # diagonal
    R: list[float] = [1.0, 1.0]


class CalibrationSection(_Section):
    K: int = 20
    N: int = 200
    p: float = 0.1
    delta_bar: float = 0.0
    delta: Optional[float] = None
    weighting: Literal["recursive", "paper-literal"] = "recursive"
    weights: Optional[list[float]] = None
    seed: int = 0


class ObstacleSection(_Section):
    center: list[float]
    radius: float
    indices: list[int] = [0, 1]


class ConstraintSection(_Section):
    A: list[list[float]] = []
    b: list[float] = []
    obstacles: list[ObstacleSection] = []
    H: list[list[float]] = []
    h: list[float] = []


class PlannerSection(_Section):
    x0: list[float]
    R: list[float] = [0.1, 0.1]  # diagonal step-cost weight
    stage_mode: Literal["eta", "max", "per-step"] = "eta"
    tol: float = 1e-6
    max_outer: int = 60


class SimulateSection(_Section):
    runs: int = 200
    seed: int = 5000
    coverage_pool: int = 400
    keep_traces: bool = False


class ExperimentConfig(_Section):
    name: str = "experiment"
    model: ModelSection = ModelSection()
    noise: dict
    sampler: SamplerSection = SamplerSection()
    metric: MetricSection = MetricSection()
    controller: ControllerSection = ControllerSection()
    calibration: CalibrationSection = CalibrationSection()
    constraints: ConstraintSection = ConstraintSection()
    planner: PlannerSection
    simulate: SimulateSection = SimulateSection()
    workers: int = 1
    out: str = "out"

    @model_validator(mode="after")
    def _risk(self):
        cal = self.calibration
        if not 0 < cal.p < 1:
            raise ValueError("p must lie in (0, 1)")
        delta = cal.p - 2 * cal.delta_bar
        if not delta > 0:
            raise ValueError("p - 2*delta_bar must be positive")
        if cal.delta is not None and not math.isclose(cal.delta, delta, abs_tol=1e-12):
            raise ValueError(f"delta must equal p - 2*delta_bar = {delta}")
        cal.delta = delta
        return self

    @property
    def delta(self) -> float:
        return float(self.calibration.delta)


def load_config(path, overrides: Optional[dict] = None) -> ExperimentConfig:
    data = tomli.loads(Path(path).read_text())
    for dotted, value in (overrides or {}).items():
        node = data
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node.setdefault(key, {})
        node[leaf] = value
    try:
        return ExperimentConfig.model_validate(data)
    except Exception as exc:  # pydantic.ValidationError
        raise ConfigurationError(str(exc)) from exc


# -- builders ---------------------------------------------------------------

def build_model(cfg: ExperimentConfig) -> Model:
    return make_model(cfg.model.id, cfg.model.dt, cfg.model.D)


def build_noise(cfg: ExperimentConfig):
    return distribution_from_dict(cfg.noise)


def build_sampler(cfg: ExperimentConfig) -> TargetSamplerConfig:
    return TargetSamplerConfig(tuple(cfg.planner.x0), cfg.calibration.N,
                               tuple(cfg.sampler.frequencies), tuple(cfg.sampler.weight_std))


def policy_designer(cfg: ExperimentConfig, model: Model):
    Q = np.diag(cfg.controller.Q)
    R = np.diag(cfg.controller.R)
    return lambda target: design_tvlqr(model, target, Q, R)


def build_metric(cfg: ExperimentConfig, model: Model) -> Metric:
    mc = cfg.metric
    lam = mc.lam if mc.lam is not None else discrete_rate(mc.gamma, cfg.model.dt, mc.m_lo, mc.m_hi)
    n = model.n_x
    if mc.source == "identity":
        c = mc.scale
        if not mc.m_lo <= c <= mc.m_hi:
            raise ConfigurationError("identity metric scale must lie in [m_lo, m_hi]")
        return Metric.scaled_identity(c, n, mc.m_lo, mc.m_hi, lam)
    if mc.source == "diag":
        return Metric.from_matrix(np.diag(mc.diag), mc.m_lo, mc.m_hi, lam)
    if mc.source == "matrix":
        return Metric.from_matrix(np.asarray(mc.matrix), mc.m_lo, mc.m_hi, lam)
    # riccati: cost-to-go at k = 0 along a reference target drawn from the sampler
    from cctraj.conformal import sample_target

    target = sample_target(build_sampler(cfg), model, substream(cfg.sampler.seed, 0, 1))
    A, B = model.batch_jac(target.states[:-1], target.controls)
    _, Ps = riccati_pass(A, B, np.diag(cfg.controller.Q), np.diag(cfg.controller.R))
    return Metric.from_matrix(normalize_into_bounds(Ps[0], mc.m_lo, mc.m_hi), mc.m_lo, mc.m_hi, lam)


def build_constraints(cfg: ExperimentConfig, n_x: int) -> ConstraintSpec:
    c = cfg.constraints
    return ConstraintSpec(
        A=np.asarray(c.A, dtype=float).reshape(-1, n_x),
        b=c.b,
        obstacles=[BallObstacle(o.center, o.radius, tuple(o.indices)) for o in c.obstacles],
        H=np.asarray(c.H, dtype=float).reshape(-1, n_x),
        h=c.h,
        p=cfg.calibration.p,
        n_x=n_x,
    )
