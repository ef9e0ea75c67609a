"""Ellipsoidal confidence sets and deterministic constraint tightening."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from cctraj import ConfigurationError


def split_risk(p: float) -> float:
    """Equal Bonferroni allocation of ``p`` over two constraint families."""
    return p / 2.0


@dataclass(frozen=True)
class Ellipsoid:
    """``{x : (x - center)^T W^{-1} (x - center) <= 1}``."""

    center: np.ndarray
    W: np.ndarray
    level: float = float("nan")

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.center, dtype=float))
        W = np.atleast_2d(np.asarray(self.W, dtype=float))
        if W.shape != (c.size, c.size):
            raise ConfigurationError("ellipsoid shape does not match center")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "W", W)

    def support(self, a) -> float:
        """``max_{y in E} a^T (y - center) = sqrt(a^T W a)``."""
        a = np.asarray(a, dtype=float)
        return float(np.sqrt(max(a @ self.W @ a, 0.0)))

    def sample_boundary(self, rng: np.random.Generator, n: int) -> np.ndarray:
        z = rng.standard_normal((n, self.center.size))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        return self.center + z @ _sqrt_psd(self.W).T

    def sample_interior(self, rng: np.random.Generator, n: int) -> np.ndarray:
        d = self.center.size
        r = rng.random(n) ** (1.0 / d)
        return self.center + (self.sample_boundary(rng, n) - self.center) * r[:, None]


def _sqrt_psd(W) -> np.ndarray:
    ev, V = np.linalg.eigh(0.5 * (W + W.T))
    return (V * np.sqrt(np.clip(ev, 0, None))) @ V.T


def confidence_ellipsoid(center, C_k: float, M_inv, level: float = float("nan")) -> Ellipsoid:
    """Set with shape ``W = C_k^2 M^{-1}`` around ``center``."""
    return Ellipsoid(center, C_k**2 * np.asarray(M_inv, dtype=float), level)


def member(e: Ellipsoid, x) -> bool:
    d = np.asarray(x, dtype=float) - e.center
    return bool(d @ np.linalg.solve(e.W, d) <= 1 + 1e-12)


def weighted_norm(a, W) -> float:
    """``sqrt(a^T W a)``; with ``W = M^{-1}`` this is ``||a||_{M^{-1}}``."""
    a = np.asarray(a, dtype=float)
    return float(np.sqrt(max(a @ np.asarray(W) @ a, 0.0)))


def halfspace_margin(A_i, M_inv, eta: float) -> float:
    """Back-off ``eta * ||A_i||_{M^{-1}}`` for ``A_i x <= b_i``.

    ``M_inv`` is the inverse metric. This equals the support function of the
    ellipsoid ``eta^2 M^{-1}`` in direction ``A_i``.
    """
    if eta < 0:
        raise ConfigurationError("eta must be non-negative")
    return eta * weighted_norm(A_i, M_inv)


@dataclass(frozen=True)
class BallObstacle:
    center: np.ndarray
    radius: float
    indices: tuple = (0, 1)

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float)
        if not self.radius > 0:
            raise ConfigurationError("obstacle radius must be positive")
        if c.shape != (len(self.indices),):
            raise ConfigurationError("obstacle center must match the selected state indices")
        if len(set(self.indices)) != len(self.indices):
            raise ConfigurationError("obstacle selector indices must be distinct")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))

    def selector(self, n_x: int) -> np.ndarray:
        P = np.zeros((len(self.indices), n_x))
        P[np.arange(len(self.indices)), self.indices] = 1.0
        return P

    def signed_distance(self, x) -> float:
        return float(np.linalg.norm(np.asarray(x)[list(self.indices)] - self.center) - self.radius)

    def normal(self, x) -> np.ndarray:
        """Outward unit normal lifted to the full state."""
        x = np.asarray(x, dtype=float)
        r = x[list(self.indices)] - self.center
        nr = np.linalg.norm(r)
        if nr == 0:
            raise ConfigurationError("normal undefined at the obstacle center")
        n = np.zeros(x.size)
        n[list(self.indices)] = r / nr
        return n


def obstacle_margin(obs: BallObstacle, xbar, M_inv, eta: float) -> float:
    """Tightened residual ``d(xbar) - eta ||n||_{M^{-1}}``; feasible iff >= 0."""
    if eta < 0:
        raise ConfigurationError("eta must be non-negative")
    return obs.signed_distance(xbar) - eta * weighted_norm(obs.normal(xbar), M_inv)


def control_confidence(L: float, W_k, ubar) -> Ellipsoid:
    """Control set ``Z = L^2 / lambda_min(W^{-1}) I`` around ``ubar``."""
    if L < 0:
        raise ConfigurationError("Lipschitz constant must be non-negative")
    lam_min = float(np.linalg.eigvalsh(np.linalg.inv(W_k)).min())
    ubar = np.atleast_1d(np.asarray(ubar, dtype=float))
    return Ellipsoid(ubar, (L**2 / lam_min) * np.eye(ubar.size))


def control_radius(L: float, W_k) -> float:
    return float(L / np.sqrt(np.linalg.eigvalsh(np.linalg.inv(W_k)).min()))


@dataclass
class ConstraintSpec:
    """State polytope ``A x <= b``, ball obstacles, goal ``H x <= h`` and risk ``p``."""

    A: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    b: np.ndarray = field(default_factory=lambda: np.zeros(0))
    obstacles: list = field(default_factory=list)
    H: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    h: np.ndarray = field(default_factory=lambda: np.zeros(0))
    p: float = 0.1
    n_x: int = 0

    def __post_init__(self):
        n = self.n_x
        self.A = np.asarray(self.A, dtype=float).reshape(-1, n) if n else np.asarray(self.A, dtype=float)
        self.H = np.asarray(self.H, dtype=float).reshape(-1, n) if n else np.asarray(self.H, dtype=float)
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        self.h = np.asarray(self.h, dtype=float).reshape(-1)
        if self.A.shape[0] != self.b.size or self.H.shape[0] != self.h.size:
            raise ConfigurationError("constraint matrices and offsets disagree in row count")
        if not 0 < self.p < 1:
            raise ConfigurationError("risk p must lie in (0, 1)")

    def state_ok(self, X: np.ndarray) -> np.ndarray:
        """Untightened membership of each row of ``X`` in the state set."""
        X = np.atleast_2d(X)
        ok = np.all(X @ self.A.T <= self.b, axis=1) if self.A.size else np.ones(len(X), bool)
        for obs in self.obstacles:
            ok &= np.linalg.norm(X[:, list(obs.indices)] - obs.center, axis=1) >= obs.radius
        return ok

    def goal_ok(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        if not self.H.size:
            return np.ones(len(X), bool)
        return np.all(X @ self.H.T <= self.h, axis=1)

    def goal_center(self) -> np.ndarray:
        """Chebyshev center of the goal polytope (LP)."""
        from scipy.optimize import linprog

        H, h = self.H, self.h
        n = H.shape[1]
        norms = np.linalg.norm(H, axis=1)
        res = linprog(
            np.r_[np.zeros(n), -1.0],
            A_ub=np.c_[H, norms],
            b_ub=h,
            bounds=[(None, None)] * n + [(0, None)],
            method="highs",
        )
        if res.status != 0:
            raise ConfigurationError("goal polytope is empty or unbounded")
        return res.x[:n]
