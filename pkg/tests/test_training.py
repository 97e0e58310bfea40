import math

import numpy as np
import pytest

from valuempc import make_env, SolverConfig
from valuempc.errors import TrainingAborted
from valuempc.training import (Dataset, ViConfig, METRIC_FIELDS, bellman_targets, collect_rollout_data,
                               fit_value, ground_truth_value, solve_values, value_iteration,
                               train_policy, train_supervised_value)
from valuempc.valuenet import QuadraticValue, TrainConfig, ValueNetwork


def _riccati(P, steps=1):
    # scalar LQR x' = x + u, l = x^2 + u^2
    for _ in range(steps):
        P = 1.0 + P / (1.0 + P)
    return P


def test_zero_value_targets_at_stationary_point():
    env = make_env("pendulum")
    rng = np.random.default_rng(0)
    x = np.stack([env.stationary_sample(rng)[0] for _ in range(4)])
    data, dropped = bellman_targets(env, x, None, horizon=5)
    assert dropped == 0
    assert np.all(data.targets <= 1e-10)


def test_lqr_targets_follow_riccati():
    env = make_env("lqr1d")
    x = np.linspace(-1, 1, 9)[:, None]
    for P in (0.0, 1.0, 3.0):
        term = QuadraticValue([[P]]) if P else None
        for T in (1, 3):
            data, _ = bellman_targets(env, x, term, horizon=T, config=SolverConfig(kkt_tolerance=1e-10))
            assert np.allclose(data.targets, _riccati(P, T) * x[:, 0] ** 2, atol=1e-9)


def test_ground_truth_lqr():
    env = make_env("lqr1d")
    x = np.array([[0.5], [-1.0], [0.8]])
    data, dropped = ground_truth_value(env, x)
    golden = (1 + math.sqrt(5)) / 2
    assert dropped == 0
    assert np.allclose(data.targets, golden * x[:, 0] ** 2, atol=1e-3)


def test_targets_drop_and_abort():
    env = make_env("pendulum")
    x, _ = env.sample_state(np.random.default_rng(1), 10)
    cfg = SolverConfig(max_sqp_iterations=0)
    data, dropped = bellman_targets(env, x, None, horizon=10, config=cfg, max_drop_fraction=1.0)
    assert dropped == 10 - len(data)
    with pytest.raises(TrainingAborted) as info:
        bellman_targets(env, x, None, horizon=10, config=cfg, max_drop_fraction=0.2)
    assert info.value.diagnostics["total"] == 10


def test_solve_values_workers_match_serial():
    env = make_env("point")
    x, _ = env.sample_state(np.random.default_rng(2), 6)
    a = solve_values(env, x, 5)
    b = solve_values(env, x, 5, workers=2, chunk=3)
    for u, v in zip(a, b):
        assert np.array_equal(u, v)


def test_rollout_data_capped():
    env = make_env("pendulum")
    starts = np.array([[0.1, 0.0], [-0.2, 0.5]])
    xs, ctx = collect_rollout_data(env, QuadraticValue(np.zeros((2, 2))), starts, max_steps=60, horizon=5)
    assert ctx is None
    assert 0 < len(xs) <= 2 * 60


def test_fit_value_reduces_loss():
    env = make_env("lqr1d")
    rng = np.random.default_rng(3)
    x = rng.uniform(-1, 1, (200, 1))
    data = Dataset(env.net_input(x), 1.618 * x[:, 0] ** 2, x)
    net = ValueNetwork.build(1, (16, 16), 4, rng)
    before = float(np.mean((net.value(data.inputs) - data.targets) ** 2))
    fit_value(net, data, TrainConfig(lr=1e-2, steps=400, alpha=0.0), rng)
    after = float(np.mean((net.value(data.inputs) - data.targets) ** 2))
    assert after < 0.1 * before


def test_fit_value_empty_dataset():
    net = ValueNetwork.build(1, (4,), 2, np.random.default_rng(0))
    empty = Dataset(np.zeros((0, 1)), np.zeros(0))
    assert math.isnan(fit_value(net, empty, TrainConfig(), np.random.default_rng(0)))


def _small_cfg(iterations=3):
    return ViConfig(iterations=iterations, samples=40, horizon=3, hidden=(8, 8), d=4,
                    train=TrainConfig(steps=20, batch_size=16))


def test_value_iteration_deterministic(tmp_path):
    env = make_env("lqr1d")
    a, ma = value_iteration(env, _small_cfg(), seed=4, metrics_path=tmp_path / "a.csv")
    b, mb = value_iteration(env, _small_cfg(), seed=4, metrics_path=tmp_path / "b.csv")
    assert np.array_equal(a.get_params(), b.get_params())
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    header = (tmp_path / "a.csv").read_text().splitlines()[0].split(",")
    assert header == METRIC_FIELDS
    assert [m["iteration"] for m in ma] == [1, 2, 3]


def test_value_iteration_first_targets_are_stage_costs():
    # V_1 = 0: with horizon 1 the first targets are min_u l(x, u) = x^2
    env = make_env("lqr1d")
    cfg = ViConfig(iterations=1, samples=20, horizon=1, hidden=(4,), d=2)
    seen = []
    value_iteration(env, cfg, seed=0, callback=lambda k, net, row: seen.append(row))
    assert seen[0]["targets"] == 20 and seen[0]["dropped"] == 0


def test_value_iteration_checkpoints(tmp_path):
    env = make_env("lqr1d")
    cfg = _small_cfg(4)
    cfg.checkpoint_every = 2
    value_iteration(env, cfg, checkpoint_dir=tmp_path / "ck")
    assert sorted(p.name for p in (tmp_path / "ck").iterdir()) == ["value_00002.json", "value_00004.json"]


def test_value_iteration_with_rollouts_runs():
    env = make_env("point")
    cfg = _small_cfg(2)
    cfg.rollout, cfg.rollout_starts, cfg.rollout_steps = True, 2, 5
    _, metrics = value_iteration(env, cfg, seed=1)
    assert metrics[1]["targets"] >= metrics[0]["targets"]


def test_baselines_train():
    env = make_env("lqr1d")
    x = np.linspace(-1, 1, 30)[:, None]
    data = Dataset(env.net_input(x), x[:, 0] ** 2, x, controls=-0.6 * x)
    v = train_supervised_value(data, TrainConfig(steps=10), hidden=(4,), d=2)
    p = train_policy(data, TrainConfig(steps=10), hidden=(4,))
    assert v.value(data.inputs).shape == (30,)
    assert p(data.inputs).shape == (30, 1)
