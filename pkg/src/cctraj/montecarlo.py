"""Closed-loop Monte-Carlo audit of chance constraints and confidence sets."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from cctraj.contraction import Metric, TrackingPolicy
from cctraj.models import Model, Trajectory
from cctraj.noise import NoiseDistribution, substream
from cctraj.tightening import ConstraintSpec


@dataclass
class ClosedLoopRun:
    states: np.ndarray  # (N+1, n_x), NaN after divergence
    controls: np.ndarray
    energies: Optional[np.ndarray]  # V_k for k = 0..N
    diverged: bool = False


def rollout(model: Model, policy: TrackingPolicy, dist: NoiseDistribution, seed: int, run: int = 0,
            metric: Optional[Metric] = None) -> ClosedLoopRun:
    """Simulate ``x' = f(x, pi(x, x*_k, u*_k)) + D(x) w`` from the plan's initial state.

    Noise for run ``run`` comes from substream ``(seed, run)``.
    """
    plan = policy.target
    N = plan.N
    W = dist.sample_n(substream(seed, run), N)
    xs = np.full((N + 1, model.n_x), np.nan)
    us = np.full((N, model.n_u), np.nan)
    xs[0] = plan.states[0]
    diverged = False
    for k in range(N):
        u = policy(xs[k], k)
        nxt = model.f(xs[k], u) + model.D(xs[k]) @ W[k]
        us[k] = u
        if not np.all(np.isfinite(nxt)):
            diverged = True
            break
        xs[k + 1] = nxt
    V = None
    if metric is not None:
        with np.errstate(invalid="ignore"):
            V = np.linalg.norm((xs - plan.states) @ metric.Theta.T, axis=1)
        V[~np.isfinite(V)] = np.inf
    return ClosedLoopRun(xs, us, V, diverged)


def binomial_slack(p: float, M: int, z: float = 3.0) -> float:
    return z * math.sqrt(p * (1 - p) / M)


@dataclass
class MCReport:
    runs: int
    state_violations: np.ndarray  # per step k = 0..N (k = 0 and N unused -> 0)
    goal_violations: int
    coverage: Optional[np.ndarray]  # fraction with V_k <= C_k, k = 1..N
    diverged: int
    method: str = "conformal"
    trajectories: Optional[np.ndarray] = field(default=None, repr=False)
    energies: Optional[np.ndarray] = field(default=None, repr=False)  # (runs, N+1)
    marginal_coverage: Optional[np.ndarray] = None  # k = 1..N, see marginal_coverage()

    @property
    def state_failure(self) -> np.ndarray:
        return self.state_violations / self.runs

    @property
    def max_state_failure(self) -> float:
        return float(self.state_failure.max())

    @property
    def goal_failure(self) -> float:
        return self.goal_violations / self.runs

    @property
    def min_coverage(self) -> float:
        return float(np.min(self.coverage)) if self.coverage is not None else float("nan")

    def summary(self) -> dict:
        out = {
            "method": self.method,
            "runs": self.runs,
            "max_state_failure": self.max_state_failure,
            "argmax_state_failure": int(np.argmax(self.state_failure)),
            "goal_failure": self.goal_failure,
            "diverged": self.diverged,
        }
        if self.coverage is not None:
            out["min_coverage_fixed_calibration"] = self.min_coverage
            out["argmin_coverage_fixed_calibration"] = int(np.argmin(self.coverage)) + 1
        if self.marginal_coverage is not None:
            out["min_coverage"] = float(self.marginal_coverage.min())
            out["argmin_coverage"] = int(np.argmin(self.marginal_coverage)) + 1
        return out


def evaluate(model: Model, policy: TrackingPolicy, dist: NoiseDistribution, runs: int,
             constraints: ConstraintSpec, C=None, metric: Optional[Metric] = None, seed: int = 0,
             workers: int = 1, keep: bool = False, method: str = "conformal") -> MCReport:
    """Audit ``runs`` closed-loop realizations (run i uses substream (seed, i)).

    State constraints are checked untightened at k = 1..N-1, the goal at
    k = N. With ``C`` (length N) and ``metric``, coverage of ``V_k <= C_k`` is
    reported. Diverged runs count as violations at every remaining step.
    """
    if runs < 1:
        raise ValueError("need at least one run")
    N = policy.target.N

    def one(i):
        return rollout(model, policy, dist, seed, i, metric)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, range(runs)))
    else:
        results = [one(i) for i in range(runs)]
    viol = np.zeros(N + 1, dtype=int)
    goal = 0
    covered = np.zeros(N, dtype=int)
    for r in results:
        X = r.states
        finite = np.all(np.isfinite(X), axis=1)
        bad = ~finite
        bad[finite] = ~constraints.state_ok(X[finite])
        bad[0] = False
        bad[N] = False
        viol += bad
        goal += int((not finite[N]) or not constraints.goal_ok(X[N])[0])
        if C is not None and r.energies is not None:
            covered += r.energies[1:] <= np.asarray(C)
    coverage = covered / runs if (C is not None and metric is not None) else None
    traj = np.stack([r.states for r in results]) if keep else None
    energies = np.stack([r.energies for r in results]) if metric is not None else None
    return MCReport(runs, viol, goal, coverage, sum(r.diverged for r in results), method, traj, energies)


def marginal_coverage(energies: np.ndarray, pool: np.ndarray, K: int, alpha: float, seed: int,
                      weights=None) -> np.ndarray:
    """Per-step fraction of runs with ``V_k <= C_k`` when each run is paired with its own calibration set.

    Run i draws ``K`` rows (without replacement) from the score ``pool`` using
    substream (seed, i) and computes its own quantiles; ``energies`` holds the
    runs' ``V_k`` for k = 0..N. This is the event whose probability the
    confidence-set guarantee bounds (calibration and test both random).
    """
    from cctraj.conformal import weighted_quantile

    runs, N = energies.shape[0], pool.shape[1]
    if pool.shape[0] < K:
        raise ValueError("score pool smaller than the calibration size")
    hits = np.zeros(N)
    for i in range(runs):
        rows = substream(seed, i).choice(pool.shape[0], size=K, replace=False)
        sub = pool[rows]
        C = np.array([weighted_quantile(sub[:, k], weights, alpha) for k in range(N)])
        hits += energies[i, 1:] <= C
    return hits / runs
