"""Gaussian-linearization baseline: MLE noise fit, covariance propagation, chi-squared tightening."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from cctraj import NumericalFailure
from cctraj.contraction import TrackingPolicy, design_tvlqr
from cctraj.models import Model, Trajectory
from cctraj.noise import DisturbanceDataset, fit_gaussian_mle, NoiseDistribution
from cctraj.montecarlo import MCReport, evaluate
from cctraj.trajopt import PlannerProblem, PlanResult, solve, warm_start

log = logging.getLogger(__name__)


@dataclass
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray


def _clip_psd(S: np.ndarray) -> np.ndarray:
    S = 0.5 * (S + S.T)
    ev, V = np.linalg.eigh(S)
    if ev.min() >= 0:
        return S
    return (V * np.clip(ev, 0, None)) @ V.T


def propagate(model: Model, policy: TrackingPolicy, Sigma_w, mu0=None, Sigma0=None) -> list[GaussianBelief]:
    """Mean/covariance propagation of the closed loop, linearized about the mean."""
    plan = policy.target
    N = plan.N
    mu = plan.states[0].copy() if mu0 is None else np.asarray(mu0, dtype=float)
    S = np.zeros((model.n_x, model.n_x)) if Sigma0 is None else np.asarray(Sigma0, dtype=float)
    Sw = np.atleast_2d(np.asarray(Sigma_w, dtype=float))
    out = [GaussianBelief(mu, S)]
    for k in range(N):
        u = policy(mu, k)
        K = policy.gains[k]
        A_cl = model.jac_x(mu, u) + model.jac_u(mu, u) @ K
        D = model.D(mu)
        mu_next = model.f(mu, u)
        S = A_cl @ S @ A_cl.T + D @ Sw @ D.T
        S = _clip_psd(S)
        if not (np.all(np.isfinite(mu_next)) and np.all(np.isfinite(S))):
            raise NumericalFailure(f"belief propagation diverged at step {k}")
        mu = mu_next
        out.append(GaussianBelief(mu, S))
    return out


def _gammainc_lower(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x) (series / continued fraction)."""
    if x <= 0:
        return 0.0
    lg = math.lgamma(a)
    if x < a + 1:
        term = total = 1.0 / a
        ap = a
        for _ in range(10000):
            ap += 1
            term *= x / ap
            total += term
            if abs(term) < abs(total) * 1e-16:
                break
        return total * math.exp(-x + a * math.log(x) - lg)
    # Lentz continued fraction for Q(a, x)
    tiny = 1e-300
    b = x + 1 - a
    c = 1 / tiny
    d = 1 / b
    h = d
    for i in range(1, 10000):
        an = -i * (i - a)
        b += 2
        d = an * d + b
        d = tiny if abs(d) < tiny else d
        c = b + an / c
        c = tiny if abs(c) < tiny else c
        d = 1 / d
        delta = d * c
        h *= delta
        if abs(delta - 1) < 1e-16:
            break
    return 1.0 - math.exp(-x + a * math.log(x) - lg) * h


def chi2_cdf(x: float, dof: int) -> float:
    return _gammainc_lower(dof / 2.0, x / 2.0)


def chi2_quantile(dof: int, level: float, tol: float = 1e-10) -> float:
    """Inverse chi-squared CDF by bisection."""
    if dof < 1:
        raise ValueError("dof must be >= 1")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    lo, hi = 0.0, max(1.0, float(dof))
    while chi2_cdf(hi, dof) < level:
        hi *= 2
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if chi2_cdf(mid, dof) < level:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def belief_shapes(beliefs: list[GaussianBelief], p: float) -> np.ndarray:
    """``W_k = chi2_{n_x}(1 - p/2) Sigma_k`` for k < N and ``chi2_{n_x}(1 - p) Sigma_N``."""
    n = beliefs[0].cov.shape[0]
    stage = chi2_quantile(n, 1 - p / 2)
    term = chi2_quantile(n, 1 - p)
    W = np.stack([stage * b.cov for b in beliefs])
    W[-1] = term * beliefs[-1].cov
    return W


@dataclass
class BaselineResult:
    plan: PlanResult
    policy: TrackingPolicy
    beliefs: list
    sweeps: int
    noise_fit: object
    report: MCReport = None


def baseline_plan(model: Model, constraints, dataset: DisturbanceDataset, x0, N: int, R, Q_lqr, R_lqr,
                  max_sweeps: int = 10, tol: float = 1e-4, seed_traj: Trajectory = None) -> BaselineResult:
    """Alternate planning and covariance propagation until the shapes settle."""
    fit = fit_gaussian_mle(dataset.samples.reshape(-1, dataset.n_w))
    W = np.zeros((N + 1, model.n_x, model.n_x))
    seed = seed_traj
    result = policy = beliefs = None
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        problem = PlannerProblem(model, constraints, x0, N, R, W, {"method": "baseline"})
        if seed is None:
            seed = warm_start(problem)
        result = solve(problem, seed)
        if result.status == "infeasible":
            policy = beliefs = None
            break
        policy = design_tvlqr(model, result.trajectory, Q_lqr, R_lqr)
        beliefs = propagate(model, policy, fit.cov, mu0=x0)
        W_new = belief_shapes(beliefs, constraints.p)
        change = float(np.max(np.abs(W_new - W)))
        log.info("baseline sweep %d: status %s, shape change %.3g", sweeps, result.status, change)
        W = W_new
        seed = result.trajectory
        if change < tol:
            break
    return BaselineResult(result, policy, beliefs, sweeps, fit)


def baseline_plan_and_evaluate(model: Model, constraints, dataset: DisturbanceDataset, true_dist: NoiseDistribution,
                               x0, N: int, R, Q_lqr, R_lqr, runs: int, seed: int, workers: int = 1,
                               **kw) -> BaselineResult:
    res = baseline_plan(model, constraints, dataset, x0, N, R, Q_lqr, R_lqr, **kw)
    if res.plan.status != "infeasible":
        res.report = evaluate(model, res.policy, true_dist, runs, constraints, seed=seed, workers=workers,
                              method="baseline")
    return res
