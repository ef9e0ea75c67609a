import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cctraj import ConfigurationError, DesignError
from cctraj.contraction import (
    Metric, TrackingPolicy, delta_v, design_tvlqr, discrete_rate, energy, normalize_into_bounds, riccati_pass,
)
from cctraj.models import Model, Trajectory, dubins_model, propagate_nominal


def scalar_model(a=1.0, b=1.0):
    return Model(1, 1, 1, 1.0, lambda x, u: a * x + b * u, lambda x: np.eye(1),
                 lambda x, u: np.array([[a]]), lambda x, u: np.array([[b]]))


@pytest.mark.parametrize("args, expected", [((1, 0.05, 0.5, 10), 0.2121), ((0.8, 0.01, 0.5, 25), 0.1403)])
def test_rate_conversion(args, expected):
    assert discrete_rate(*args) == pytest.approx(expected, abs=5e-4)


def test_rate_one_rejected():
    with pytest.raises(ConfigurationError):
        discrete_rate(0.0, 0.05, 1.0, 1.0)


def test_rate_input_errors():
    with pytest.raises(ConfigurationError):
        discrete_rate(1.0, 0.05, 2.0, 1.0)
    with pytest.raises(ConfigurationError):
        discrete_rate(30.0, 0.05, 0.5, 10)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.01, 9.0), st.floats(0.001, 0.05), st.floats(0.1, 5), st.floats(1.0, 4.0))
def test_rate_in_unit_interval_and_monotone(gamma, dt, m_lo, ratio):
    m_hi = m_lo * ratio
    lam = discrete_rate(gamma, dt, m_lo, m_hi)
    assert 0 <= lam < 1
    assert discrete_rate(gamma * 1.05, dt, m_lo, m_hi) <= lam


@pytest.mark.parametrize("Theta, d, expected", [
    (np.eye(4), [3, 4, 0, 0], 5.0),
    (np.diag([2.0, 1, 1, 1]), [1, 0, 0, 0], 2.0),
    (np.eye(4), [0, 0, 0, 0], 0.0),
])
def test_energy_hand_values(Theta, d, expected):
    m = Metric(Theta, 1.0, 4.0, 0.2)
    assert energy(m, np.asarray(d, float) + 1.0, np.ones(4)) == pytest.approx(expected)


def test_metric_bounds_enforced():
    with pytest.raises(ConfigurationError):
        Metric(np.eye(2) * 4, 0.5, 10.0, 0.2)
    with pytest.raises(ConfigurationError):
        Metric(np.eye(2), 0.5, 10.0, 1.0)


def test_metric_round_trip_and_inverse():
    m = Metric.from_matrix(np.diag([10.0, 10.0, 0.5, 0.5]), 0.5, 10.0, 0.2121)
    np.testing.assert_allclose(m.M, np.diag([10.0, 10.0, 0.5, 0.5]), atol=1e-12)
    np.testing.assert_allclose(m.M @ m.M_inv, np.eye(4), atol=1e-12)
    again = Metric.from_dict(m.to_dict())
    assert again.digest() == m.digest()


def test_normalize_into_bounds():
    P = normalize_into_bounds(np.diag([100.0, 1.0, 1e-6]), 0.5, 10.0)
    np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(P)), [0.5, 0.5, 10.0])


def _scalar_dare(a, b, q, r):
    p = q
    for _ in range(10_000):
        p = q + a * a * p - (a * b * p) ** 2 / (r + b * b * p)
    return p, -(a * b * p) / (r + b * b * p)


def test_riccati_converges_to_scalar_dare():
    a, b, q, r = 1.2, 0.5, 1.0, 0.3
    N = 400
    Ks, Ps = riccati_pass(np.full((N, 1, 1), a), np.full((N, 1, 1), b), np.eye(1) * q, np.eye(1) * r)
    p_inf, k_inf = _scalar_dare(a, b, q, r)
    assert Ks[0, 0, 0] == pytest.approx(k_inf, rel=1e-9)
    assert Ps[0, 0, 0] == pytest.approx(p_inf, rel=1e-9)


def test_policy_returns_target_control_on_target(rng):
    car = dubins_model(0.05)
    U = rng.normal(size=(40, 2))
    target = Trajectory(propagate_nominal(car, [0, 0, 0, 1.0], U), U)
    pol = design_tvlqr(car, target)
    for k in (0, 17, 39):
        np.testing.assert_allclose(pol(target.states[k], k), target.controls[k])


def test_tvlqr_closed_loop_is_stable_along_moving_target():
    car = dubins_model(0.05)
    U = np.tile([0.3, 0.0], (100, 1))
    target = Trajectory(propagate_nominal(car, [0, 0, 0, 1.0], U), U)
    pol = design_tvlqr(car, target, np.diag([1e3, 1e3, 10, 10]), 0.01 * np.eye(2))
    A, B = car.batch_jac(target.states[:-1], target.controls)
    rho = [max(abs(np.linalg.eigvals(A[k] + B[k] @ pol.gains[k]))) for k in range(100)]
    # the last step cannot act on position (one-step horizon), every earlier one contracts
    assert max(rho[:-1]) < 1
    assert rho[-1] == pytest.approx(1.0)


def test_design_rejects_indefinite_weights(rng):
    car = dubins_model(0.05)
    U = np.zeros((5, 2))
    target = Trajectory(propagate_nominal(car, np.zeros(4), U), U)
    with pytest.raises(ConfigurationError):
        design_tvlqr(car, target, Q=-np.eye(4))


def test_lipschitz_is_largest_gain_norm():
    target = Trajectory(np.zeros((3, 1)), np.zeros((2, 1)))
    pol = TrackingPolicy(target, np.array([[[-0.5]], [[2.0]]]))
    assert pol.lipschitz == 2.0


@pytest.mark.parametrize("lam, expected", [(0.4, 0.2), (0.6, 0.0)])
def test_scalar_decay_residual(lam, expected):
    model = scalar_model()
    target = Trajectory(np.zeros((2, 1)), np.zeros((1, 1)))
    pol = TrackingPolicy(target, np.array([[[-0.5]]]))
    metric = Metric(np.eye(1), 1.0, 1.0, lam)
    assert delta_v(metric, model, pol, [2.0], [0.0], [0.0], 0) == pytest.approx(expected)


def test_residual_zero_on_target(rng):
    car = dubins_model(0.05)
    U = rng.normal(size=(10, 2))
    target = Trajectory(propagate_nominal(car, [0, 0, 0, 1.0], U), U)
    pol = design_tvlqr(car, target)
    metric = Metric.scaled_identity(1.0, 4, 0.5, 10, 0.2)
    assert delta_v(metric, car, pol, target.states[3], target.states[3], target.controls[3], 3) == 0.0


def test_riccati_divergence_raises():
    N = 200
    A = np.full((N, 1, 1), 1e200)
    with pytest.raises(DesignError), np.errstate(over="ignore", invalid="ignore"):
        riccati_pass(A, np.zeros((N, 1, 1)), np.eye(1), np.eye(1))
