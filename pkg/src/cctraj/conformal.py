"""Target sampling, nonconformity scores and (weighted) conformal quantiles."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from cctraj import ConfigurationError, InsufficientCalibrationError
from cctraj.contraction import Metric, TrackingPolicy, energy
from cctraj.models import Model, Trajectory, propagate_nominal
from cctraj.noise import DisturbanceDataset, substream

log = logging.getLogger(__name__)

WEIGHTINGS = ("recursive", "paper-literal")


@dataclass(frozen=True)
class TargetSamplerConfig:
    """Random sinusoidal control targets propagated from ``x0``."""

    x0: tuple
    N: int
    frequencies: tuple = (0.5, 1.0, 2.0, 3.0, 4.0)
    weight_std: tuple = (0.5, 0.5)

    def __post_init__(self):
        if len(self.frequencies) == 0:
            raise ConfigurationError("sampler needs at least one frequency")
        if any(s <= 0 for s in self.weight_std):
            raise ConfigurationError("weight_std entries must be positive")
        if self.N < 1:
            raise ConfigurationError("horizon must be >= 1")
        object.__setattr__(self, "x0", tuple(float(v) for v in self.x0))
        object.__setattr__(self, "frequencies", tuple(float(v) for v in self.frequencies))
        object.__setattr__(self, "weight_std", tuple(float(v) for v in self.weight_std))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.__dict__, sort_keys=True).encode()).hexdigest()[:16]


def sample_target(cfg: TargetSamplerConfig, model: Model, rng: np.random.Generator) -> Trajectory:
    if len(cfg.weight_std) != model.n_u:
        raise ConfigurationError("weight_std needs one entry per control channel")
    t = np.arange(cfg.N) * model.dt
    omega = np.asarray(cfg.frequencies)
    std = np.asarray(cfg.weight_std)
    a = rng.standard_normal((model.n_u, omega.size)) * std[:, None]
    b = rng.standard_normal((model.n_u, omega.size)) * std[:, None]
    phase = np.outer(t, omega)  # (N, m)
    controls = np.sin(phase) @ a.T + np.cos(phase) @ b.T
    states = propagate_nominal(model, np.asarray(cfg.x0), controls)
    return Trajectory(states, controls)


@dataclass
class Rollout:
    states: np.ndarray
    scores: np.ndarray
    energies: np.ndarray  # V_k for k = 1..N
    diverged: bool = False


def _weighted_sum(terms: np.ndarray, lam: float, weighting: str) -> np.ndarray:
    N = terms.size
    S = np.empty(N)
    if weighting == "recursive":
        acc = 0.0
        for k in range(N):
            acc = lam * acc + terms[k]
            S[k] = acc
    elif weighting == "paper-literal":
        S[:] = np.cumsum(lam ** np.arange(N) * terms)
    else:
        raise ConfigurationError(f"unknown weighting {weighting!r}")
    return S


def simulate_scored(model: Model, metric: Metric, policy: TrackingPolicy, noise_seq,
                    weighting: str = "recursive") -> Rollout:
    """Closed-loop rollout around ``policy.target`` with per-step score terms.

    Term i is ``delta_v_i + ||Theta D(x_i) w_i||``; the score ``S_k`` at
    ``k = 1..N`` sums terms ``0..k-1`` with factor ``lam**(k-1-i)``
    ("recursive") or ``lam**i`` ("paper-literal").
    """
    target = policy.target
    N = target.N
    W = np.asarray(noise_seq, dtype=float)
    if W.shape[0] < N:
        raise ConfigurationError(f"noise sequence shorter ({W.shape[0]}) than horizon {N}")
    T, lam = metric.Theta, metric.lam
    xs = np.empty((N + 1, model.n_x))
    xs[0] = target.states[0]
    terms = np.full(N, np.inf)
    diverged = False
    for i in range(N):
        x, xb, ub = xs[i], target.states[i], target.controls[i]
        nom = model.f(x, policy.gains[i] @ (x - xb) + ub)
        ref = model.f(xb, ub)
        e = x - xb
        dv = max(0.0, float(np.linalg.norm(T @ (nom - ref))) - lam * float(np.linalg.norm(T @ e)))
        Dw = model.D(x) @ W[i]
        xs[i + 1] = nom + Dw
        terms[i] = dv + float(np.linalg.norm(T @ Dw))
        if not (np.all(np.isfinite(xs[i + 1])) and np.isfinite(terms[i])):
            log.warning("rollout diverged at step %d", i)
            xs[i + 1:] = np.nan
            terms[i:] = np.inf
            diverged = True
            break
    with np.errstate(invalid="ignore"):
        S = _weighted_sum(terms, lam, weighting)
        V = np.linalg.norm((xs[1:] - target.states[1:]) @ T.T, axis=1)
    S[~np.isfinite(S)] = np.inf
    V[~np.isfinite(V)] = np.inf
    return Rollout(xs, S, V, diverged)


def score_rollout(model: Model, metric: Metric, policy_designer: Callable[[Trajectory], TrackingPolicy],
                  target: Trajectory, noise_seq, weighting: str = "recursive") -> np.ndarray:
    """Length-N nonconformity scores of one closed-loop rollout (``+inf`` if diverged)."""
    return simulate_scored(model, metric, policy_designer(target), noise_seq, weighting).scores


@dataclass
class ScoreTable:
    S: np.ndarray  # (K, N); column k-1 holds S_k
    provenance: dict = field(default_factory=dict)
    energies: Optional[np.ndarray] = None  # (K, N) V_k on the calibration rollouts

    @property
    def K(self) -> int:
        return self.S.shape[0]

    @property
    def N(self) -> int:
        return self.S.shape[1]


def calibrate(model: Model, metric: Metric, dataset: DisturbanceDataset, sampler: TargetSamplerConfig,
              policy_designer: Callable[[Trajectory], TrackingPolicy], weighting: str = "recursive",
              sampler_seed: int = 0, workers: int = 1) -> ScoreTable:
    """Score K rollouts, rollout j tracking target j ~ Omega against noise sequence j."""
    if weighting not in WEIGHTINGS:
        raise ConfigurationError(f"unknown weighting {weighting!r}")
    if dataset.N < sampler.N:
        raise ConfigurationError("dataset horizon shorter than sampler horizon")

    def one(j: int) -> Rollout:
        target = sample_target(sampler, model, substream(sampler_seed, j))
        return simulate_scored(model, metric, policy_designer(target), dataset.samples[j], weighting)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rollouts = list(pool.map(one, range(dataset.K)))
    else:
        rollouts = [one(j) for j in range(dataset.K)]
    prov = {
        "dataset_seed": dataset.seed,
        "sampler_seed": sampler_seed,
        "sampler": sampler.digest(),
        "metric": metric.digest(),
        "weighting": weighting,
        "diverged": int(sum(r.diverged for r in rollouts)),
    }
    return ScoreTable(np.stack([r.scores for r in rollouts]), prov,
                      np.stack([r.energies for r in rollouts]))


def weighted_quantile(scores: Sequence[float], weights: Optional[Sequence[float]], alpha: float) -> float:
    """``(1 - alpha)``-quantile of ``sum_i wbar_i delta_{S_i} + wbar_inf delta_inf``.

    ``wbar_i = w_i / (sum w + 1)`` and ``wbar_inf = 1 / (sum w + 1)``. Returns
    ``inf`` when only the atom at infinity reaches the requested mass.
    """
    s = np.asarray(scores, dtype=float)
    if s.ndim != 1 or s.size == 0:
        raise ConfigurationError("scores must be a non-empty vector")
    w = np.ones_like(s) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != s.shape:
        raise ConfigurationError("weights and scores must have equal length")
    if np.any(w < 0) or np.any(w > 1):
        raise ConfigurationError("weights must lie in [0, 1]")
    if not 0 < alpha < 1:
        raise ConfigurationError("alpha must lie in (0, 1)")
    order = np.argsort(s, kind="stable")
    cum = np.cumsum(w[order])
    need = (1.0 - alpha) * (w.sum() + 1.0)
    # relative slack absorbs rounding in (1 - alpha) * total
    hit = np.nonzero(cum >= need * (1 - 1e-12))[0]
    if hit.size == 0:
        return math.inf
    return float(s[order][hit[0]])


def min_calibration_size(alpha: float) -> int:
    """Smallest K with ``K >= ceil((1 - alpha)(K + 1))`` under uniform weights."""
    K = 1
    while K < math.ceil((1 - alpha) * (K + 1) - 1e-12):
        K += 1
    return K


@dataclass
class QuantileSchedule:
    C: np.ndarray  # length N, C[k-1] = C_k
    alpha: float
    weights: Optional[np.ndarray] = None
    collapsed: bool = False
    collapse_gap: float = 0.0  # max_k C_k - C_N before collapsing

    @property
    def eta(self) -> float:
        return float(self.C[-1])


def quantile_schedule(table: ScoreTable, delta: float, delta_bar: float = 0.0, weights=None,
                      collapse: bool = False) -> QuantileSchedule:
    """Per-step quantiles ``C_k = q_{1 - delta + delta_bar}(S_k)``."""
    if not 0 < delta < 1:
        raise ConfigurationError("delta must lie in (0, 1)")
    if not 0 <= delta_bar < delta:
        raise ConfigurationError("delta_bar must satisfy 0 <= delta_bar < delta")
    alpha = delta - delta_bar
    C = np.array([weighted_quantile(table.S[:, k], weights, alpha) for k in range(table.N)])
    if not np.all(np.isfinite(C)):
        bad = int(np.argmax(~np.isfinite(C))) + 1
        raise InsufficientCalibrationError(
            f"quantile at level {1 - alpha:g} is infinite from step {bad}; "
            f"K={table.K} calibration rollouts, at least {min_calibration_size(alpha)} finite scores needed"
        )
    gap = float(C.max() - C[-1])
    if collapse:
        if gap > 0:
            log.warning("C_N is not the largest quantile (short by %.3g); collapsing anyway", gap)
        C = np.full_like(C, C[-1])
    return QuantileSchedule(C, alpha, None if weights is None else np.asarray(weights, float), collapse, gap)
