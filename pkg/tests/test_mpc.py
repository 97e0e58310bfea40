import csv

import numpy as np
import pytest

from valuempc import make_env, SolverConfig, mpc_step, mpc_rollout, mpc_rollout_batch
from valuempc.errors import ContractError
from valuempc.mpc import summarize, trace_rows, write_trace_csv
from valuempc.valuenet import QuadraticValue


def test_pendulum_at_goal_stays():
    env = make_env("pendulum")
    tr = mpc_rollout(env, [np.pi, 0.0], None, 5, 10)
    assert tr.steps == 10
    assert tr.cumulative_cost < 1e-10
    assert tr.reached and tr.reached_step == 0


def test_lqr_closed_loop_matches_riccati_gain():
    # with terminal P_inf x^2 every horizon gives the infinite-horizon gain
    env = make_env("lqr1d")
    P = (1 + np.sqrt(5)) / 2
    u0, res, degraded = mpc_step(env, np.array([1.0]), QuadraticValue([[P]]), 3)
    assert not degraded
    assert u0[0] == pytest.approx(-P / (1 + P), abs=1e-6)
    tr = mpc_rollout(env, [1.0], QuadraticValue([[P]]), 1, 30)
    assert tr.cumulative_cost == pytest.approx(P, abs=1e-5)


def test_infeasible_start_is_flagged():
    env = make_env("point")
    with pytest.raises(ContractError):
        mpc_step(env, np.zeros(2), None, 5)
    traces = mpc_rollout_batch(env, np.array([[0.0, 0.0], [-0.8, 0.5]]), None, 5, 3)
    assert traces[0].infeasible and traces[0].steps == 0
    assert not traces[1].infeasible and traces[1].steps == 3


def test_point_rollout_keeps_clear_of_obstacle():
    env = make_env("point")
    tr = mpc_rollout(env, [-0.7, 0.05], QuadraticValue(np.zeros((2, 2))), 10, 150)
    assert np.min(env.signed_distance(tr.states)) >= -1e-3
    assert tr.max_violation <= 1e-3


def test_horizon_zero_uses_policy():
    env = make_env("pendulum")
    calls = []

    def policy(x, ctx):
        calls.append(x.shape)
        return np.full((x.shape[0], 1), 99.0)

    tr = mpc_rollout(env, [0.0, 0.0], policy, 0, 3)
    assert len(calls) == 3
    lo, hi = env.control_bounds()
    assert np.all(tr.controls <= hi)


def test_stop_on_reach_truncates():
    env = make_env("pendulum")
    tr = mpc_rollout(env, [np.pi, 0.0], None, 3, 20, stop_on_reach=True)
    assert tr.steps == 1


def test_summaries_and_csv(tmp_path):
    env = make_env("lqr1d")
    tr = mpc_rollout(env, [0.5], None, 2, 4)
    s = summarize([tr])
    assert s["rollouts"] == 1 and s["mean_cost"] == pytest.approx(tr.cumulative_cost)
    assert summarize([])["rollouts"] == 0
    rows = trace_rows(tr)
    assert len(rows) == 4 and rows[0]["x0"] == 0.5
    write_trace_csv(tr, tmp_path / "t.csv")
    with open(tmp_path / "t.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 4


def test_online_cap_degrades_gracefully():
    env = make_env("pendulum")
    cfg = SolverConfig.online(max_sqp_iterations=1)
    tr = mpc_rollout(env, [0.0, 0.0], None, 20, 5, config=cfg)
    assert tr.steps == 5
    assert np.all(np.isfinite(tr.controls))
    assert np.all(tr.iterations <= 1)
