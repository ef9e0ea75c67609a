"""Tightened nominal trajectory optimization by full direct transcription.

Decision variables are the states ``x_1..x_N`` and controls ``u_0..u_{N-1}``
(``x_0`` is fixed). The nonlinear program is solved with an augmented
Lagrangian outer loop around L-BFGS inner minimizations; obstacle normals used
in the back-off terms are frozen during an inner solve and refreshed between
outer iterations.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from cctraj import ConfigurationError, NumericalFailure
from cctraj.models import Model, Trajectory, propagate_nominal
from cctraj.tightening import ConstraintSpec

log = logging.getLogger(__name__)

STATUSES = ("optimal-local", "feasible", "infeasible", "max-iter")


@dataclass
class PlannerProblem:
    model: Model
    constraints: ConstraintSpec
    x0: np.ndarray
    N: int
    R: np.ndarray
    W: np.ndarray  # (N+1, n_x, n_x) confidence-set shapes; W[k] tightens step k
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x0 = self.model.check_x(self.x0)
        self.R = np.asarray(self.R, dtype=float)
        self.W = np.asarray(self.W, dtype=float)
        n = self.model.n_x
        if self.W.shape != (self.N + 1, n, n):
            raise ConfigurationError(f"W must have shape ({self.N + 1}, {n}, {n}), got {self.W.shape}")
        if self.R.shape != (self.model.n_u, self.model.n_u):
            raise ConfigurationError("R has wrong shape")


def conformal_problem(model: Model, constraints: ConstraintSpec, M_inv, stage_eta, terminal_eta: float,
                      x0, N: int, R, info: Optional[dict] = None) -> PlannerProblem:
    """Problem with ``W_k = eta_k^2 M^{-1}`` (``stage_eta`` scalar or per-step) and ``W_N = eta^2 M^{-1}``."""
    stage = np.broadcast_to(np.asarray(stage_eta, dtype=float), (N,)) if np.ndim(stage_eta) == 0 \
        else np.asarray(stage_eta, dtype=float)
    if stage.shape != (N,):
        raise ConfigurationError("per-step eta must have length N (index k = 0..N-1)")
    if not np.all(np.isfinite(stage)) or not math.isfinite(terminal_eta):
        raise ConfigurationError("tightening quantiles must be finite")
    M_inv = np.asarray(M_inv, dtype=float)
    W = np.empty((N + 1, M_inv.shape[0], M_inv.shape[0]))
    W[:N] = stage[:, None, None] ** 2 * M_inv
    W[N] = terminal_eta**2 * M_inv
    return PlannerProblem(model, constraints, x0, N, R, W, dict(info or {}))


@dataclass
class PlanResult:
    trajectory: Trajectory
    objective: float
    defect: float
    violation: float
    iterations: int
    wall_time: float
    status: str
    margins: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# warm start

def _segment_clearance(a, b, c) -> float:
    ab = b - a
    t = np.clip(np.dot(c - a, ab) / max(np.dot(ab, ab), 1e-300), 0.0, 1.0)
    return float(np.linalg.norm(a + t * ab - c))


def _detour(path: list, c: np.ndarray, clear: float) -> list:
    """Insert a polygon around ``c`` on the left of travel (counterclockwise tangent)."""
    out = [path[0]]
    for a, b in zip(path[:-1], path[1:]):
        if _segment_clearance(a, b, c) > clear:
            out.append(b)
            continue
        d = (b - a) / np.linalg.norm(b - a)
        nrm = np.array([-d[1], d[0]])
        Rc = 1.05 * clear / math.cos(math.pi / 8)
        for phi in np.deg2rad([180, 135, 90, 45, 0]):
            out.append(c + Rc * (math.cos(phi) * d + math.sin(phi) * nrm))
        out.append(b)
    return out


def _shortcut(path: list, balls: list) -> list:
    pts = list(path)
    i = 0
    while i + 2 < len(pts):
        a, b = pts[i], pts[i + 2]
        if all(_segment_clearance(a, b, c) > r for c, r in balls):
            del pts[i + 1]
        else:
            i += 1
    return pts


def _resample(path: list, n: int) -> np.ndarray:
    P = np.asarray(path)
    seg = np.linalg.norm(np.diff(P, axis=0), axis=1)
    s = np.r_[0.0, np.cumsum(seg)]
    t = np.linspace(0.0, s[-1], n)
    return np.stack([np.interp(t, s, P[:, j]) for j in range(P.shape[1])], axis=1)


def warm_start(problem: PlannerProblem) -> Trajectory:
    """Interpolated seed from ``x0`` to the goal center, bent around inflated obstacles.

    Obstacles are inflated by ``max_k sqrt(lambda_max(W_k))``, which bounds the
    back-off ``||n||_{W_k}`` for any unit normal. Controls start at zero.
    """
    m, cons = problem.model, problem.constraints
    N, x0 = problem.N, problem.x0
    goal = cons.goal_center() if cons.H.size else x0.copy()
    if cons.H.size:
        free = ~np.any(cons.H != 0, axis=0)
        goal[free] = x0[free]
    X = x0 + np.linspace(0.0, 1.0, N + 1)[:, None] * (goal - x0)
    inflate = float(np.sqrt(max(np.linalg.eigvalsh(Wk).max() for Wk in problem.W)))
    for idx in sorted({obs.indices for obs in cons.obstacles}):
        group = [o for o in cons.obstacles if o.indices == idx]
        if len(idx) != 2:
            continue
        balls = [(o.center, o.radius + inflate) for o in group]
        start, end = x0[list(idx)], goal[list(idx)]
        if np.allclose(start, end):
            continue
        path = [start, end]
        # nearest obstacles first along the travel direction
        d = end - start
        for c, r in sorted(balls, key=lambda cr: np.dot(cr[0] - start, d)):
            path = _detour(path, c, r)
        path = _shortcut(path, balls)
        X[:, list(idx)] = _resample(path, N + 1)
    X[0] = x0
    return Trajectory(X, np.zeros((N, m.n_u)))


# --------------------------------------------------------------------------
# augmented Lagrangian

class _Transcription:
    def __init__(self, problem: PlannerProblem):
        p = problem
        self.p = p
        self.m = p.model
        self.c = p.constraints
        self.N, self.nx, self.nu = p.N, p.model.n_x, p.model.n_u
        n_state = self.N * self.nx
        self.split = n_state
        W = p.W
        A, H = self.c.A, self.c.H
        # constant back-offs for polytope rows (k = 1..N-1) and goal rows (k = N)
        if A.size:
            self.m_poly = np.sqrt(np.maximum(np.einsum("ij,kjl,il->ki", A, W[1:self.N], A), 0.0))
        else:
            self.m_poly = np.zeros((self.N - 1, 0))
        if H.size:
            self.m_goal = np.sqrt(np.maximum(np.einsum("ij,jl,il->i", H, W[self.N], H), 0.0))
        else:
            self.m_goal = np.zeros(0)
        self.normals = None
        self.m_obs = np.zeros((self.N - 1, len(self.c.obstacles)))

    def unpack(self, z):
        X = np.empty((self.N + 1, self.nx))
        X[0] = self.p.x0
        X[1:] = z[: self.split].reshape(self.N, self.nx)
        U = z[self.split:].reshape(self.N, self.nu)
        return X, U

    def pack(self, X, U):
        return np.concatenate([X[1:].ravel(), U.ravel()])

    def refresh_normals(self, X):
        """Freeze obstacle normals and back-offs at the current iterate."""
        W = self.p.W
        J = len(self.c.obstacles)
        self.normals = []
        for j, obs in enumerate(self.c.obstacles):
            idx = list(obs.indices)
            r = X[1:self.N, idx] - obs.center
            nr = np.linalg.norm(r, axis=1, keepdims=True)
            nr[nr == 0] = 1.0
            n = np.zeros((self.N - 1, self.nx))
            n[:, idx] = r / nr
            self.normals.append(n)
            self.m_obs[:, j] = np.sqrt(np.maximum(np.einsum("ki,kij,kj->k", n, W[1:self.N], n), 0.0))
        if J == 0:
            self.m_obs = np.zeros((self.N - 1, 0))

    def objective(self, U):
        return float(np.einsum("ki,ij,kj->", U, self.p.R, U))

    def eq(self, X, U):
        return X[1:] - self.m.batch_f(X[:-1], U)

    def ineq(self, X):
        """Residuals g <= 0: polytope rows, obstacles (k = 1..N-1), goal rows (k = N)."""
        Xs = X[1:self.N]
        parts = []
        if self.c.A.size:
            parts.append((Xs @ self.c.A.T + self.m_poly - self.c.b).ravel())
        for j, obs in enumerate(self.c.obstacles):
            d = np.linalg.norm(Xs[:, list(obs.indices)] - obs.center, axis=1) - obs.radius
            parts.append(self.m_obs[:, j] - d)
        if self.c.H.size:
            parts.append(self.c.H @ X[self.N] + self.m_goal - self.c.h)
        return np.concatenate(parts) if parts else np.zeros(0)

    def ineq_vjp(self, X, y):
        """Gradient w.r.t. X of ``y . ineq(X)``."""
        G = np.zeros_like(X)
        off = 0
        n_s = self.N - 1
        if self.c.A.size:
            l = self.c.A.shape[0]
            G[1:self.N] += y[off: off + n_s * l].reshape(n_s, l) @ self.c.A
            off += n_s * l
        for obs in self.c.obstacles:
            idx = list(obs.indices)
            r = X[1:self.N, idx] - obs.center
            nr = np.linalg.norm(r, axis=1, keepdims=True)
            nr[nr == 0] = 1.0
            G[1:self.N, idx] -= y[off: off + n_s, None] * r / nr
            off += n_s
        if self.c.H.size:
            G[self.N] += y[off:] @ self.c.H
        return G

    def lagrangian(self, z, nu, lam, mu):
        X, U = self.unpack(z)
        c = self.eq(X, U)
        g = self.ineq(X)
        y = nu + mu * c
        s = np.maximum(0.0, lam + mu * g)
        val = self.objective(U) + float(np.sum(nu * c) + 0.5 * mu * np.sum(c * c)) \
            + float(np.sum(s * s - lam * lam)) / (2 * mu)
        A, B = self.m.batch_jac(X[:-1], U)
        GX = np.zeros_like(X)
        GX[1:] += y
        GX[:-1] -= np.einsum("kij,ki->kj", A, y)
        GU = 2.0 * U @ self.p.R - np.einsum("kij,ki->kj", B, y)
        if g.size:
            GX += self.ineq_vjp(X, s)
        return val, self.pack(GX, GU)


def _violation(tr: _Transcription, X, U) -> tuple[float, float]:
    defect = float(np.max(np.abs(tr.eq(X, U))))
    g = tr.ineq(X)
    viol = float(max(0.0, g.max())) if g.size else 0.0
    return defect, viol


def solve(problem: PlannerProblem, seed: Trajectory, tol: float = 1e-6, max_outer: int = 60,
          mu0: float = 10.0, mu_max: float = 1e8, inner_maxiter: int = 3000) -> PlanResult:
    """Solve the tightened planning problem from ``seed``."""
    t0 = time.perf_counter()
    tr = _Transcription(problem)
    z = tr.pack(seed.states, seed.controls)
    X, U = tr.unpack(z)
    tr.refresh_normals(X)
    nu = np.zeros((problem.N, tr.nx))
    lam = np.zeros(tr.ineq(X).size)
    mu = mu0
    inner_tol = 1e-3
    prev = math.inf
    iters = 0
    stall = 0
    best = None
    status = "max-iter"
    for outer in range(max_outer):
        res = minimize(tr.lagrangian, z, args=(nu, lam, mu), jac=True, method="L-BFGS-B",
                       options={"maxiter": inner_maxiter, "gtol": inner_tol, "ftol": 1e-15, "maxcor": 30})
        if not np.isfinite(res.fun):
            raise NumericalFailure("non-finite augmented Lagrangian")
        iters += int(res.nit)
        z = res.x
        X, U = tr.unpack(z)
        c = tr.eq(X, U)
        g = tr.ineq(X)
        defect, viol = _violation(tr, X, U)
        worst = max(defect, viol)
        log.debug("outer %d: obj %.6g defect %.2e viol %.2e mu %.1e", outer, tr.objective(U), defect, viol, mu)
        prev_best = math.inf if best is None else best[0]
        if best is None or worst < best[0] or (worst <= tol and tr.objective(U) < best[1]):
            best = (worst, tr.objective(U), z.copy())
        nu = nu + mu * c
        lam = np.maximum(0.0, lam + mu * g)
        if worst <= tol and inner_tol <= 1e-8 * 1.0001:
            status = "optimal-local"
            break
        if worst > 0.25 * prev:
            mu = min(mu * 10.0, mu_max)
        # infeasibility: violation no longer improves although the penalty is large
        stall = stall + 1 if (mu >= 1e6 and worst > 0.5 * prev_best) else 0
        if stall >= 3 and worst > 1e3 * tol:
            status = "infeasible"
            break
        prev = worst
        inner_tol = max(inner_tol * 0.1, 1e-8)
        tr.refresh_normals(X)
    if status != "optimal-local":
        z = best[2]
    X, U = tr.unpack(z)
    X, U, defect, viol = _polish(tr, X, U)
    if status == "max-iter" and max(defect, viol) <= tol:
        status = "feasible"
    if status == "optimal-local" and max(defect, viol) > tol:
        status = "max-iter"
    return PlanResult(
        Trajectory(X, U), tr.objective(U), defect, viol, iters, time.perf_counter() - t0, status,
        {"poly": tr.m_poly.tolist(), "goal": tr.m_goal.tolist(), "obstacle": tr.m_obs.tolist()},
    )


def _polish(tr: _Transcription, X, U):
    """Prefer the exact rollout of ``U`` when it is at least as feasible."""
    defect, viol = _violation(tr, X, U)
    Xr = propagate_nominal(tr.m, tr.p.x0, U)
    if np.all(np.isfinite(Xr)):
        d2, v2 = _violation(tr, Xr, U)
        if max(d2, v2) <= max(defect, viol) or v2 <= 1e-6:
            return Xr, U, d2, v2
    return X, U, defect, viol


def check_plan(problem: PlannerProblem, traj: Trajectory) -> tuple[float, float]:
    """Max dynamics defect and max tightened-constraint violation of ``traj``."""
    tr = _Transcription(problem)
    tr.refresh_normals(traj.states)
    return _violation(tr, traj.states, traj.controls)
