import numpy as np
import pytest

from valuempc import make_env, step, rollout, linearize
from valuempc.core import dynamics_defect, Trajectory
from valuempc.errors import ContractError


def test_step_examples():
    assert np.allclose(step(make_env("pendulum"), [0.0, 0.0], [0.0]), [0.0, 0.0])
    assert np.allclose(step(make_env("point"), [0.0, 0.0], [1.0, 0.0]), [0.02, 0.0])
    assert np.allclose(step(make_env("lqr1d"), [1.0], [-0.5]), [0.5])


def test_step_dimension_mismatch():
    with pytest.raises(ContractError):
        step(make_env("point"), [0.0, 0.0, 0.0], [0.0, 0.0])
    with pytest.raises(ContractError):
        step(make_env("pendulum"), [0.0, 0.0], [0.0, 1.0])


def test_rollout_pendulum_rest():
    env = make_env("pendulum")
    tr = rollout(env, [0.0, 0.0], np.zeros((10, 1)))
    assert tr.horizon == 10
    assert np.allclose(tr.states, 0.0)
    assert tr.cumulative_cost == pytest.approx(20.0)


def test_rollout_point_at_target_costs_nothing():
    env = make_env("point")
    tr = rollout(env, env.target, np.zeros((25, 2)))
    assert tr.cumulative_cost == 0.0


def test_rollout_lqr():
    tr = rollout(make_env("lqr1d"), [1.0], [[-0.5]])
    assert tr.states[-1, 0] == pytest.approx(0.5)
    assert tr.cumulative_cost == pytest.approx(1.25)


def test_rollout_cost_is_sum_of_stage_costs():
    env = make_env("pendulum")
    rng = np.random.default_rng(0)
    u = rng.uniform(-2, 2, (30, 1))
    tr = rollout(env, [0.3, -1.0], u)
    indep = np.array([float(env.stage_cost(tr.states[k], u[k])) for k in range(30)])
    assert np.array_equal(tr.costs, indep)
    assert tr.cumulative_cost == float(np.sum(indep))
    assert dynamics_defect(env, tr.states, tr.controls) == 0.0


def test_trajectory_length_check():
    with pytest.raises(ContractError):
        Trajectory(np.zeros((3, 2)), np.zeros((3, 1)), np.zeros(3))


def test_linearize_linear_envs():
    lin = linearize(make_env("point"), [0.3, -0.2], [0.5, 0.1])
    assert np.allclose(lin.A, np.eye(2))
    assert np.allclose(lin.B, 0.02 * np.eye(2))
    lin = linearize(make_env("lqr1d"), [0.4], [0.1])
    assert np.allclose(lin.A, 1.0) and np.allclose(lin.B, 1.0)


def test_linearize_pendulum_matches_fd():
    env = make_env("pendulum")
    x, u = np.array([np.pi / 4, 0.0]), np.array([0.0])
    exact = linearize(env, x, u)
    fd = linearize(env, x, u, finite_difference=True)
    for a, b in ((exact.A, fd.A), (exact.B, fd.B)):
        assert np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12) < 1e-5


@pytest.mark.parametrize("name", ["lqr1d", "pendulum", "point", "point_cond"])
def test_linearize_random_points_match_fd(name):
    env = make_env(name)
    rng = np.random.default_rng(1)
    for _ in range(100):
        x, ctx = env.sample_state(rng)
        u = rng.uniform(-1, 1, env.n_u)
        a = linearize(env, x, u, ctx)
        b = linearize(env, x, u, ctx, finite_difference=True)
        for name_, m1, m2 in (("A", a.A, b.A), ("B", a.B, b.B), ("gx", a.cost_grad_x, b.cost_grad_x),
                              ("gu", a.cost_grad_u, b.cost_grad_u), ("cx", a.constraint_x, b.constraint_x)):
            scale = max(np.max(np.abs(m2), initial=0.0), 1.0)
            assert np.max(np.abs(m1 - m2), initial=0.0) / scale < 1e-4, name_
