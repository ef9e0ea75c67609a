import numpy as np
import pytest

from cctraj.contraction import Metric, design_tvlqr
from cctraj.models import Trajectory, dubins_model, propagate_nominal
from cctraj.montecarlo import binomial_slack, evaluate, marginal_coverage, rollout
from cctraj.noise import UniformBox, dubins_mixture_case, dubins_uniform_case
from cctraj.tightening import ConstraintSpec


@pytest.fixture(scope="module")
def setup():
    car = dubins_model(0.05)
    U = np.tile([0.2, 0.0], (60, 1))
    target = Trajectory(propagate_nominal(car, [0, 0, 0, 1.0], U), U)
    policy = design_tvlqr(car, target, np.diag([1e3, 1e3, 10, 10]), 0.01 * np.eye(2))
    metric = Metric.from_matrix(np.diag([10.0, 10.0, 0.5, 0.5]), 0.5, 10.0, 0.2121)
    return car, policy, metric


def test_zero_noise_tracks_plan_exactly(setup):
    car, policy, metric = setup
    run = rollout(car, policy, UniformBox(np.zeros(4), np.zeros(4)), seed=1, metric=metric)
    np.testing.assert_allclose(run.states, policy.target.states, atol=1e-12)
    np.testing.assert_allclose(run.energies, 0.0, atol=1e-12)


def test_fixed_seed_is_bit_identical(setup):
    car, policy, _ = setup
    a = rollout(car, policy, dubins_uniform_case(), seed=9, run=4)
    b = rollout(car, policy, dubins_uniform_case(), seed=9, run=4)
    np.testing.assert_array_equal(a.states, b.states)
    c = rollout(car, policy, dubins_uniform_case(), seed=9, run=5)
    assert np.any(a.states != c.states)


def test_selective_noise_leaves_position_update_deterministic(setup):
    car_sel = dubins_model(0.05, np.diag([0.0, 0.0, 1.0, 1.0]))
    _, policy, _ = setup
    run = rollout(car_sel, policy, dubins_mixture_case(), seed=2)
    X, U = run.states, run.controls
    # positions follow the noiseless kinematics of the realized heading and speed
    nominal = np.stack([car_sel.f(x, u) for x, u in zip(X[:-1], U)])
    np.testing.assert_allclose(X[1:, :2], nominal[:, :2], atol=1e-12)
    assert np.any(np.abs(X[1:, 2:] - nominal[:, 2:]) > 1e-3)


def test_evaluate_counts_violations_and_workers_agree(setup):
    car, policy, metric = setup
    # wall placed where the noisy runs spread around the plan's y coordinate
    y_mid = float(np.median(policy.target.states[:, 1]))
    cons = ConstraintSpec(A=[[0, 1, 0, 0]], b=[y_mid + 10.0], n_x=4)
    tight = ConstraintSpec(A=[[0, -1, 0, 0]], b=[-1e3], n_x=4)
    C = np.full(60, 1e6)
    r1 = evaluate(car, policy, dubins_uniform_case(), 30, cons, C=C, metric=metric, seed=3)
    r2 = evaluate(car, policy, dubins_uniform_case(), 30, cons, C=C, metric=metric, seed=3, workers=4)
    assert r1.max_state_failure == 0.0
    np.testing.assert_array_equal(r1.energies, r2.energies)
    assert r1.min_coverage == 1.0
    bad = evaluate(car, policy, dubins_uniform_case(), 10, tight, seed=3)
    # every interior step violates, boundary steps are not audited
    np.testing.assert_array_equal(bad.state_violations[1:-1], 10)
    assert bad.state_violations[0] == 0 and bad.state_violations[-1] == 0
    assert bad.summary()["method"] == "conformal"


def test_marginal_coverage_with_identical_pool():
    energies = np.zeros((5, 4))
    energies[:, 1:] = 1.0
    pool = np.tile(np.array([[0.5, 1.0, 2.0]]), (30, 1))
    cov = marginal_coverage(energies, pool, 20, 0.1, seed=0)
    np.testing.assert_array_equal(cov, [0.0, 1.0, 1.0])


def test_binomial_slack():
    assert binomial_slack(0.1, 200) == pytest.approx(3 * np.sqrt(0.09 / 200))
