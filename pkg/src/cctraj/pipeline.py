"""End-to-end orchestration: calibrate, plan, simulate and the Gaussian baseline."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from cctraj import ConfigurationError
from cctraj.artifacts import CalibrationArtifact
from cctraj.baseline import BaselineResult, baseline_plan_and_evaluate
from cctraj.config import (
    ExperimentConfig, build_constraints, build_metric, build_model, build_noise, build_sampler,
    policy_designer,
)
from cctraj.conformal import calibrate, quantile_schedule
from cctraj.contraction import Metric, TrackingPolicy
from cctraj.montecarlo import MCReport, evaluate, marginal_coverage
from cctraj.noise import DisturbanceDataset, build_dataset
from cctraj.trajopt import PlannerProblem, PlanResult, conformal_problem, solve, warm_start

log = logging.getLogger(__name__)


def make_dataset(cfg: ExperimentConfig, seed: Optional[int] = None) -> DisturbanceDataset:
    c = cfg.calibration
    return build_dataset(build_noise(cfg), c.K, c.N, c.seed if seed is None else seed)


def run_calibration(cfg: ExperimentConfig, dataset: Optional[DisturbanceDataset] = None) -> CalibrationArtifact:
    """Score table plus the quantiles used for auditing and for tightening.

    Raises ``InsufficientCalibrationError`` when K is too small for a level.
    """
    model = build_model(cfg)
    metric = build_metric(cfg, model)
    ds = dataset if dataset is not None else make_dataset(cfg)
    c = cfg.calibration
    if ds.N < c.N:
        raise ConfigurationError(f"dataset horizon {ds.N} shorter than N={c.N}")
    table = calibrate(model, metric, ds, build_sampler(cfg), policy_designer(cfg, model), c.weighting,
                      sampler_seed=cfg.sampler.seed, workers=cfg.workers)
    delta = cfg.delta
    audit = quantile_schedule(table, delta, c.delta_bar, c.weights)
    stage = quantile_schedule(table, delta / 2, 0.0, c.weights)
    terminal = quantile_schedule(table, delta, 0.0, c.weights)
    prov = dict(table.provenance, model=cfg.model.id, dt=cfg.model.dt, noise=ds.distribution)
    return CalibrationArtifact(
        table.K, table.N, c.p, delta, c.delta_bar, c.weighting, c.weights,
        audit.C, stage.C, terminal.eta, metric.to_dict(), prov, table.S, table.energies,
    )


def stage_etas(cfg: ExperimentConfig, art: CalibrationArtifact) -> np.ndarray:
    """Back-off quantiles for steps k = 0..N-1 according to ``planner.stage_mode``."""
    N = art.N
    mode = cfg.planner.stage_mode
    if mode == "eta":
        return np.full(N, art.eta)
    if mode == "max":
        return np.full(N, float(np.max(art.stage_eta)))
    # per-step: stage_eta[k-1] tightens step k; step 0 is never constrained
    return np.r_[art.stage_eta[0], art.stage_eta[:-1]]


def build_problem(cfg: ExperimentConfig, art: CalibrationArtifact, scale: float = 1.0) -> PlannerProblem:
    model = build_model(cfg)
    if art.N != cfg.calibration.N:
        raise ConfigurationError(f"calibration horizon {art.N} does not match config N={cfg.calibration.N}")
    metric = Metric.from_dict(art.metric)
    cons = build_constraints(cfg, model.n_x)
    return conformal_problem(
        model, cons, metric.M_inv, scale * stage_etas(cfg, art), scale * art.eta,
        np.asarray(cfg.planner.x0), art.N, np.diag(cfg.planner.R),
        {"method": "conformal", "calibration": art.hash, "stage_mode": cfg.planner.stage_mode},
    )


def plan(cfg: ExperimentConfig, art: CalibrationArtifact, scale: float = 1.0) -> tuple[PlannerProblem, PlanResult]:
    problem = build_problem(cfg, art, scale)
    result = solve(problem, warm_start(problem), tol=cfg.planner.tol, max_outer=cfg.planner.max_outer)
    return problem, result


@dataclass
class SimulationOutcome:
    report: MCReport
    policy: TrackingPolicy


def simulate(cfg: ExperimentConfig, plan_traj, art: Optional[CalibrationArtifact] = None,
             noise=None, coverage: bool = True, seed: Optional[int] = None) -> SimulationOutcome:
    """Monte-Carlo audit of the closed loop tracking ``plan_traj``.

    With a calibration artifact, coverage of ``V_k <= C_k`` is reported both for
    the fixed calibration set and marginally (fresh calibration set per run,
    drawn from a pool of ``simulate.coverage_pool`` scored rollouts).
    """
    model = build_model(cfg)
    dist = build_noise(cfg) if noise is None else noise
    policy = policy_designer(cfg, model)(plan_traj)
    cons = build_constraints(cfg, model.n_x)
    sim = cfg.simulate
    seed = sim.seed if seed is None else seed
    metric = Metric.from_dict(art.metric) if art is not None else None
    report = evaluate(model, policy, dist, sim.runs, cons, C=None if art is None else art.C, metric=metric,
                      seed=seed, workers=cfg.workers, keep=sim.keep_traces)
    if art is not None and coverage and sim.coverage_pool >= art.K:
        pool_ds = build_dataset(dist, sim.coverage_pool, art.N, seed + 1)
        pool = calibrate(model, metric, pool_ds, build_sampler(cfg), policy_designer(cfg, model),
                         art.weighting, sampler_seed=seed + 2, workers=cfg.workers)
        alpha = art.delta - art.delta_bar
        report.marginal_coverage = marginal_coverage(report.energies, pool.S, art.K, alpha, seed + 3,
                                                     art.weights)
    return SimulationOutcome(report, policy)


def run_baseline(cfg: ExperimentConfig, dataset: Optional[DisturbanceDataset] = None,
                 noise=None, seed: Optional[int] = None) -> BaselineResult:
    model = build_model(cfg)
    ds = dataset if dataset is not None else make_dataset(cfg)
    cons = build_constraints(cfg, model.n_x)
    return baseline_plan_and_evaluate(
        model, cons, ds, build_noise(cfg) if noise is None else noise, np.asarray(cfg.planner.x0),
        cfg.calibration.N, np.diag(cfg.planner.R), np.diag(cfg.controller.Q), np.diag(cfg.controller.R),
        cfg.simulate.runs, cfg.simulate.seed if seed is None else seed, cfg.workers,
    )
