import numpy as np
import pytest

from cctraj import ConfigurationError
from cctraj.models import dubins_model
from cctraj.tightening import BallObstacle, ConstraintSpec
from cctraj.trajopt import PlannerProblem, check_plan, conformal_problem, solve, warm_start

GOAL_H = [[1, 0, 0, 0], [-1, 0, 0, 0], [0, 1, 0, 0], [0, -1, 0, 0]]


def goal_box(cx, cy, half):
    return [cx + half, -(cx - half), cy + half, -(cy - half)]


@pytest.fixture(scope="module")
def car():
    return dubins_model(0.1)


def problem(car, cons, eta, x0, N=30):
    return conformal_problem(car, cons, np.eye(4), eta, eta, x0, N, 0.1 * np.eye(2))


def test_warm_start_without_obstacles_is_straight(car):
    cons = ConstraintSpec(H=GOAL_H, h=goal_box(3.0, 1.0, 0.2), n_x=4)
    seed = warm_start(problem(car, cons, 0.0, [0, 0, 0, 0.5]))
    np.testing.assert_array_equal(seed.states[0], [0, 0, 0, 0.5])
    np.testing.assert_allclose(seed.states[-1, :2], [3.0, 1.0], atol=1e-9)
    steps = np.diff(seed.states[:, :2], axis=0)
    np.testing.assert_allclose(steps, np.tile(steps[0], (30, 1)), atol=1e-12)
    np.testing.assert_array_equal(seed.controls, 0.0)


def test_warm_start_clears_inflated_obstacle(car):
    obs = BallObstacle([2.0, 0.0], 0.5)
    cons = ConstraintSpec(obstacles=[obs], H=GOAL_H, h=goal_box(4.0, 0.0, 0.2), n_x=4)
    eta = 0.2
    seed = warm_start(problem(car, cons, eta, [0, 0, 0, 0]))
    d = np.linalg.norm(seed.states[:, :2] - obs.center, axis=1)
    assert d.min() > obs.radius + eta


def test_zero_control_solution_when_goal_on_free_flow(car):
    # x0 moves at 1 m/s along x; after 3 s it sits inside the goal box
    cons = ConstraintSpec(H=GOAL_H, h=goal_box(3.0, 0.0, 0.3), n_x=4)
    prob = problem(car, cons, 0.0, [0, 0, 0, 1.0])
    res = solve(prob, warm_start(prob))
    assert res.status in ("optimal-local", "feasible")
    assert res.objective == pytest.approx(0.0, abs=1e-8)
    assert np.max(np.abs(res.trajectory.controls)) < 1e-4


def test_margins_are_active(car):
    cons = ConstraintSpec(A=[[0, 1, 0, 0]], b=[0.5], H=GOAL_H, h=goal_box(3.0, 0.45, 0.05), n_x=4)
    loose = problem(car, cons, 0.0, [0, 0, 0, 0.5])
    res = solve(loose, warm_start(loose))
    assert res.status == "optimal-local"
    assert res.defect <= 1e-6 and res.violation <= 1e-6
    assert np.all(cons.state_ok(res.trajectory.states))
    _, viol = check_plan(problem(car, cons, 0.3, [0, 0, 0, 0.5]), res.trajectory)
    assert viol > 0.1


def test_obstacle_avoidance_respects_tightened_distance(car):
    obs = BallObstacle([2.0, 0.0], 0.5)
    cons = ConstraintSpec(obstacles=[obs], H=GOAL_H, h=goal_box(4.0, 0.0, 0.2), n_x=4)
    prob = problem(car, cons, 0.15, [0, 0, 0, 0], N=40)
    res = solve(prob, warm_start(prob))
    assert res.status == "optimal-local"
    d = np.linalg.norm(res.trajectory.states[:-1, :2] - obs.center, axis=1) - obs.radius
    assert d.min() >= 0.15 - 1e-6
    assert res.margins["obstacle"]


def test_infeasible_problem_is_reported(car):
    # goal box narrower than the terminal back-off: the tightened goal set is empty
    cons = ConstraintSpec(H=GOAL_H, h=goal_box(3.0, 0.0, 0.05), n_x=4)
    prob = problem(car, cons, 0.3, [0, 0, 0, 0], N=20)
    assert solve(prob, warm_start(prob)).status == "infeasible"


def test_solve_is_deterministic(car):
    obs = BallObstacle([2.0, 0.1], 0.5)
    cons = ConstraintSpec(obstacles=[obs], H=GOAL_H, h=goal_box(4.0, 0.0, 0.2), n_x=4)
    prob = problem(car, cons, 0.1, [0, 0, 0, 0])
    a = solve(prob, warm_start(prob))
    b = solve(prob, warm_start(prob))
    np.testing.assert_array_equal(a.trajectory.states, b.trajectory.states)
    np.testing.assert_array_equal(a.trajectory.controls, b.trajectory.controls)


def test_problem_shape_validation(car):
    cons = ConstraintSpec(n_x=4)
    with pytest.raises(ConfigurationError):
        PlannerProblem(car, cons, np.zeros(4), 5, np.eye(2), np.zeros((5, 4, 4)))
    with pytest.raises(ConfigurationError):
        conformal_problem(car, cons, np.eye(4), np.ones(3), 1.0, np.zeros(4), 5, np.eye(2))
    with pytest.raises(ConfigurationError):
        conformal_problem(car, cons, np.eye(4), np.inf, 1.0, np.zeros(4), 5, np.eye(2))
