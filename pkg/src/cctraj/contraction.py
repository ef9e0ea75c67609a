"""Constant contraction metrics, TV-LQR tracking policies and decay residuals."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from cctraj import ConfigurationError, DesignError
from cctraj.models import Model, Trajectory


def discrete_rate(gamma: float, dt: float, m_lo: float, m_hi: float) -> float:
    """Discrete contraction rate ``sqrt((1 - 2 gamma dt) m_lo / m_hi)``."""
    if not gamma > 0:
        raise ConfigurationError("continuous rate must be positive")
    if not 0 < m_lo <= m_hi:
        raise ConfigurationError("metric bounds must satisfy 0 < m_lo <= m_hi")
    a = 1.0 - 2.0 * gamma * dt
    if a <= 0:
        raise ConfigurationError(f"1 - 2*gamma*dt = {a} must be positive")
    lam = float(np.sqrt(a * m_lo / m_hi))
    if lam >= 1:
        raise ConfigurationError(f"contraction rate {lam} must be < 1")
    return lam


@dataclass(frozen=True)
class Metric:
    """Constant metric ``M = Theta^T Theta`` with spectrum bounds and rate."""

    Theta: np.ndarray
    m_lo: float
    m_hi: float
    lam: float

    def __post_init__(self):
        T = np.atleast_2d(np.asarray(self.Theta, dtype=float))
        if T.shape[0] != T.shape[1]:
            raise ConfigurationError("Theta must be square")
        if not 0 <= self.lam < 1:
            raise ConfigurationError("contraction rate must lie in [0, 1)")
        ev = np.linalg.eigvalsh(T.T @ T)
        if ev.min() < self.m_lo - 1e-9 or ev.max() > self.m_hi + 1e-9:
            raise ConfigurationError(
                f"metric spectrum [{ev.min():.6g}, {ev.max():.6g}] outside [{self.m_lo}, {self.m_hi}]"
            )
        T = T.copy()
        T.setflags(write=False)
        object.__setattr__(self, "Theta", T)

    @property
    def M(self) -> np.ndarray:
        return self.Theta.T @ self.Theta

    @property
    def M_inv(self) -> np.ndarray:
        Ti = np.linalg.inv(self.Theta)
        return Ti @ Ti.T

    @classmethod
    def from_matrix(cls, M, m_lo: float, m_hi: float, lam: float) -> "Metric":
        M = np.asarray(M, dtype=float)
        ev, V = np.linalg.eigh(0.5 * (M + M.T))
        if ev.min() <= 0:
            raise ConfigurationError("metric must be positive definite")
        return cls(np.sqrt(ev)[:, None] * V.T, m_lo, m_hi, lam)

    @classmethod
    def scaled_identity(cls, c: float, n: int, m_lo: float, m_hi: float, lam: float) -> "Metric":
        return cls(np.sqrt(c) * np.eye(n), m_lo, m_hi, lam)

    def to_dict(self) -> dict:
        return {"Theta": self.Theta.tolist(), "m_lo": self.m_lo, "m_hi": self.m_hi, "lambda": self.lam}

    @classmethod
    def from_dict(cls, d: dict) -> "Metric":
        return cls(np.asarray(d["Theta"], dtype=float), d["m_lo"], d["m_hi"], d["lambda"])

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict()).encode()).hexdigest()[:16]


def normalize_into_bounds(P, m_lo: float, m_hi: float) -> np.ndarray:
    """Scale ``P`` so its top eigenvalue is ``m_hi``; lift smaller ones to ``m_lo``."""
    P = 0.5 * (np.asarray(P, dtype=float) + np.asarray(P, dtype=float).T)
    ev, V = np.linalg.eigh(P)
    if ev.max() <= 0:
        raise ConfigurationError("cannot normalize a matrix without positive eigenvalues")
    ev = np.clip(ev * (m_hi / ev.max()), m_lo, m_hi)
    return (V * ev) @ V.T


@dataclass(frozen=True)
class TrackingPolicy:
    """``u = ubar_k + K_k (x - xbar_k)`` around a fixed target trajectory."""

    target: Trajectory
    gains: np.ndarray  # (N, n_u, n_x)

    @property
    def N(self) -> int:
        return self.gains.shape[0]

    def __call__(self, x, k: int) -> np.ndarray:
        return self.target.controls[k] + self.gains[k] @ (np.asarray(x) - self.target.states[k])

    def feedback(self, x, xbar, ubar, k: int) -> np.ndarray:
        """Evaluate the policy against an explicit reference pair."""
        return ubar + self.gains[k] @ (np.asarray(x) - xbar)

    @property
    def lipschitz(self) -> float:
        """Lipschitz constant of the error feedback, ``max_k ||K_k||_2``."""
        return float(max(np.linalg.norm(K, 2) for K in self.gains))


def riccati_pass(A, B, Q, R, Qf=None):
    """Finite-horizon discrete Riccati recursion; returns gains and cost-to-go."""
    N, n_x = A.shape[0], A.shape[1]
    P = np.asarray(Q if Qf is None else Qf, dtype=float).copy()
    Ks = np.empty((N, B.shape[2], n_x))
    Ps = np.empty((N + 1, n_x, n_x))
    Ps[N] = P
    for k in range(N - 1, -1, -1):
        Ak, Bk = A[k], B[k]
        BtP = Bk.T @ P
        K = -np.linalg.solve(R + BtP @ Bk, BtP @ Ak)
        P = Q + Ak.T @ P @ (Ak + Bk @ K)
        P = 0.5 * (P + P.T)
        if not np.all(np.isfinite(P)):
            raise DesignError(f"Riccati recursion diverged at step {k}")
        Ks[k] = K
        Ps[k] = P
    return Ks, Ps


def design_tvlqr(model: Model, target: Trajectory, Q=None, R=None, Qf=None) -> TrackingPolicy:
    """TV-LQR gains along the linearization of ``model`` about ``target``."""
    Q = np.eye(model.n_x) if Q is None else np.asarray(Q, dtype=float)
    R = np.eye(model.n_u) if R is None else np.asarray(R, dtype=float)
    for name, W in (("Q", Q), ("R", R)):
        if not np.allclose(W, W.T) or np.linalg.eigvalsh(W).min() <= 0:
            raise ConfigurationError(f"{name} must be symmetric positive definite")
    A, B = model.batch_jac(target.states[:-1], target.controls)
    Ks, _ = riccati_pass(A, B, Q, R, Qf)
    return TrackingPolicy(target, Ks)


def energy(metric: Metric, a, b) -> float:
    """Weighted distance ``||Theta (a - b)||``."""
    return float(np.linalg.norm(metric.Theta @ (np.asarray(a, dtype=float) - np.asarray(b, dtype=float))))


def closed_loop_step(model: Model, policy: TrackingPolicy, x, xbar, ubar, k: int) -> np.ndarray:
    return model.f(x, policy.feedback(x, xbar, ubar, k))


def delta_v(metric: Metric, model: Model, policy: TrackingPolicy, x, xbar, ubar, k: int) -> float:
    """Residual of the one-step decay condition at step ``k`` (never negative)."""
    x = np.asarray(x, dtype=float)
    xbar = np.asarray(xbar, dtype=float)
    nxt = closed_loop_step(model, policy, x, xbar, ubar, k)
    ref = closed_loop_step(model, policy, xbar, xbar, ubar, k)
    return max(0.0, energy(metric, nxt, ref) - metric.lam * energy(metric, x, xbar))
