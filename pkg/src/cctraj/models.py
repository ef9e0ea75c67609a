"""Discrete-time models ``x' = f(x, u) + D(x) w`` and the Dubins car."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from cctraj import ConfigurationError

Array = np.ndarray


def fd_jacobians(f: Callable[[Array, Array], Array]):
    """Central-difference Jacobians of ``f`` w.r.t. x and u.

    Step size is ``1e-6 * max(1, |z_i|)`` per coordinate.
    """

    def _jac(fun, z):
        z = np.asarray(z, dtype=float)
        cols = []
        for i in range(z.size):
            h = 1e-6 * max(1.0, abs(z[i]))
            zp, zm = z.copy(), z.copy()
            zp[i] += h
            zm[i] -= h
            cols.append((fun(zp) - fun(zm)) / (2 * h))
        return np.stack(cols, axis=-1)

    def jac_x(x, u):
        return _jac(lambda z: f(z, u), x)

    def jac_u(x, u):
        return _jac(lambda z: f(x, z), u)

    return jac_x, jac_u


@dataclass(frozen=True)
class Model:
    n_x: int
    n_u: int
    n_w: int
    dt: float
    f: Callable[[Array, Array], Array]
    D: Callable[[Array], Array]
    jac_x: Optional[Callable[[Array, Array], Array]] = None
    jac_u: Optional[Callable[[Array, Array], Array]] = None
    name: str = "custom"
    # Optional batched versions over leading axis, used by the planner.
    f_batch: Optional[Callable[[Array, Array], Array]] = field(default=None, repr=False)
    jac_batch: Optional[Callable[[Array, Array], tuple]] = field(default=None, repr=False)

    def __post_init__(self):
        if self.jac_x is None or self.jac_u is None:
            jx, ju = fd_jacobians(self.f)
            object.__setattr__(self, "jac_x", self.jac_x or jx)
            object.__setattr__(self, "jac_u", self.jac_u or ju)

    def check_x(self, x) -> Array:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n_x,):
            raise ConfigurationError(f"state must have shape ({self.n_x},), got {x.shape}")
        return x

    def check_u(self, u) -> Array:
        u = np.asarray(u, dtype=float)
        if u.shape != (self.n_u,):
            raise ConfigurationError(f"control must have shape ({self.n_u},), got {u.shape}")
        return u

    def check_w(self, w) -> Array:
        w = np.asarray(w, dtype=float)
        if w.shape != (self.n_w,):
            raise ConfigurationError(f"noise must have shape ({self.n_w},), got {w.shape}")
        return w

    def batch_f(self, X: Array, U: Array) -> Array:
        if self.f_batch is not None:
            return self.f_batch(X, U)
        return np.stack([self.f(x, u) for x, u in zip(X, U)])

    def batch_jac(self, X: Array, U: Array) -> tuple[Array, Array]:
        if self.jac_batch is not None:
            return self.jac_batch(X, U)
        A = np.stack([self.jac_x(x, u) for x, u in zip(X, U)])
        B = np.stack([self.jac_u(x, u) for x, u in zip(X, U)])
        return A, B


@dataclass
class Trajectory:
    states: Array  # (N+1, n_x)
    controls: Array  # (N, n_u)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.controls = np.asarray(self.controls, dtype=float)
        if self.states.ndim != 2 or self.controls.ndim != 2:
            raise ConfigurationError("states and controls must be 2-D arrays")
        if self.controls.shape[0] < 1 or self.states.shape[0] != self.controls.shape[0] + 1:
            raise ConfigurationError(
                f"inconsistent trajectory lengths: {self.states.shape[0]} states, "
                f"{self.controls.shape[0]} controls"
            )

    @property
    def N(self) -> int:
        return self.controls.shape[0]


def step_nominal(model: Model, x, u) -> Array:
    return np.asarray(model.f(model.check_x(x), model.check_u(u)), dtype=float)


def step_noisy(model: Model, x, u, w) -> Array:
    x = model.check_x(x)
    return step_nominal(model, x, u) + model.D(x) @ model.check_w(w)


def dynamics_defect(model: Model, traj: Trajectory) -> float:
    """Max-norm of ``x_{k+1} - f(x_k, u_k)`` along ``traj``."""
    nxt = model.batch_f(traj.states[:-1], traj.controls)
    return float(np.max(np.abs(traj.states[1:] - nxt)))


def propagate_nominal(model: Model, x0, controls) -> Array:
    controls = np.asarray(controls, dtype=float)
    xs = np.empty((controls.shape[0] + 1, model.n_x))
    xs[0] = model.check_x(x0)
    for k, u in enumerate(controls):
        xs[k + 1] = model.f(xs[k], u)
    return xs


# Dubins car: x = [p_x, p_y, theta, v], u = [omega, a].

def dubins_model(dt: float, D_spec=None) -> Model:
    """Euler-discretized Dubins car with constant noise matrix ``D_spec``.

    ``x' = x + dt * [v cos(th), v sin(th), omega, a] + D w``. Heading is not
    wrapped.
    """
    if not dt > 0:
        raise ConfigurationError(f"dt must be positive, got {dt}")
    dt = float(dt)
    Dm = np.eye(4) if D_spec is None else np.asarray(D_spec, dtype=float)
    if Dm.ndim == 1:
        Dm = Dm.reshape(4, -1)
    if Dm.shape[0] != 4:
        raise ConfigurationError(f"Dubins noise matrix needs 4 rows, got {Dm.shape}")
    Dm = Dm.copy()
    Dm.setflags(write=False)

    def f(x, u):
        th, v = x[2], x[3]
        return np.array([
            x[0] + dt * v * np.cos(th),
            x[1] + dt * v * np.sin(th),
            th + dt * u[0],
            v + dt * u[1],
        ])

    def f_batch(X, U):
        th, v = X[:, 2], X[:, 3]
        out = X.copy()
        out[:, 0] += dt * v * np.cos(th)
        out[:, 1] += dt * v * np.sin(th)
        out[:, 2] += dt * U[:, 0]
        out[:, 3] += dt * U[:, 1]
        return out

    def jac_x(x, u):
        th, v = x[2], x[3]
        A = np.eye(4)
        A[0, 2] = -dt * v * np.sin(th)
        A[0, 3] = dt * np.cos(th)
        A[1, 2] = dt * v * np.cos(th)
        A[1, 3] = dt * np.sin(th)
        return A

    B0 = np.zeros((4, 2))
    B0[2, 0] = dt
    B0[3, 1] = dt

    def jac_u(x, u):
        return B0.copy()

    def jac_batch(X, U):
        n = X.shape[0]
        th, v = X[:, 2], X[:, 3]
        A = np.broadcast_to(np.eye(4), (n, 4, 4)).copy()
        A[:, 0, 2] = -dt * v * np.sin(th)
        A[:, 0, 3] = dt * np.cos(th)
        A[:, 1, 2] = dt * v * np.cos(th)
        A[:, 1, 3] = dt * np.sin(th)
        return A, np.broadcast_to(B0, (n, 4, 2)).copy()

    return Model(
        n_x=4, n_u=2, n_w=Dm.shape[1], dt=dt,
        f=f, D=lambda x: Dm, jac_x=jac_x, jac_u=jac_u,
        name="dubins", f_batch=f_batch, jac_batch=jac_batch,
    )


MODELS = {"dubins": dubins_model}


def make_model(model_id: str, dt: float, D_spec=None) -> Model:
    try:
        factory = MODELS[model_id]
    except KeyError:
        raise ConfigurationError(f"unknown model id {model_id!r}") from None
    return factory(dt, D_spec)
