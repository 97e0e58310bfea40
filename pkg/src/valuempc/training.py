"""Fitted value iteration with multi-step Bellman targets, plus baselines.

Each iteration samples states, solves the horizon-T lookahead problem from
every state with the current (frozen) network as terminal cost, and regresses
the network onto the optimal costs while pinning it to zero on stationary
points.  The first iteration solves without terminal cost, which is value
iteration started from the zero function.
"""
from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import TrainingAborted, NumericalError
from .mpc import mpc_rollout_batch
from .solver import SolverConfig, solve_batch
from .valuenet import (Adam, PolicyNetwork, TerminalValue, TrainConfig, ValueNetwork,
                       save_checkpoint)

log = logging.getLogger(__name__)

METRIC_FIELDS = ["iteration", "targets", "dropped", "bellman_residual", "loss", "mean_target",
                 "v_stationary"]
# wall-clock columns live in a separate file so metric CSVs stay reproducible
TIMING_FIELDS = ["iteration", "solve_time", "fit_time"]


@dataclass
class ViConfig:
    iterations: int = 100            # N
    samples: int = 500               # n, states per iteration
    stationary: int = 1              # m, anchors per mini-batch
    horizon: int = 10                # T
    hidden: tuple = (64, 64, 64)
    d: int = 64
    rollout: bool = False            # augment with closed-loop MPC states
    augment_last: bool = False       # also fit targets at each trajectory's final state
    rollout_starts: int = 20
    rollout_steps: int = 60
    max_drop_fraction: float = 0.2
    checkpoint_every: int = 50
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.iterations < 1 or self.samples < 1 or self.horizon < 1:
            raise ValueError("iterations, samples and horizon must be >= 1")
        if self.stationary < 0:
            raise ValueError("stationary must be >= 0")

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class Dataset:
    """Regression records: network inputs and nonnegative target values."""

    inputs: np.ndarray
    targets: np.ndarray
    states: np.ndarray | None = None
    contexts: np.ndarray | None = None
    controls: np.ndarray | None = None
    final_states: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, float)
        self.targets = np.asarray(self.targets, float).reshape(-1)
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError("inputs and targets differ in length")
        if not np.all(np.isfinite(self.targets)):
            raise NumericalError("non-finite target in dataset")
        if np.any(self.targets < 0):
            raise ValueError("targets must be nonnegative")

    def __len__(self):
        return self.targets.shape[0]

    def subset(self, idx):
        pick = lambda a: None if a is None else a[idx]
        return Dataset(self.inputs[idx], self.targets[idx], pick(self.states), pick(self.contexts),
                       pick(self.controls), pick(self.final_states))

    @classmethod
    def concat(cls, parts):
        parts = [p for p in parts if len(p)]
        join = lambda name: (None if any(getattr(p, name) is None for p in parts)
                             else np.concatenate([getattr(p, name) for p in parts]))
        return cls(np.concatenate([p.inputs for p in parts]), np.concatenate([p.targets for p in parts]),
                   join("states"), join("contexts"), join("controls"), join("final_states"))


# -- target generation -----------------------------------------------------------

def _solve_chunk(args):
    env, states, horizon, terminal, contexts, config = args
    sol = solve_batch(env, states, horizon, terminal, contexts, config)
    return sol.cost, sol.controls[:, 0], sol.converged, sol.states[:, -1]


def solve_values(env, states, horizon, terminal=None, contexts=None, config=None, workers=1,
                 chunk=None):
    """Optimal costs, first controls, convergence flags and final states from every state.

    With ``workers > 1`` the batch is split into chunks solved in worker
    processes; results are identical to the serial path because every OCP is
    solved independently.
    """
    config = SolverConfig.offline() if config is None else config
    states = np.atleast_2d(np.asarray(states, float))
    n = states.shape[0]
    if n == 0:
        return np.zeros(0), np.zeros((0, env.n_u)), np.zeros(0, bool), np.zeros((0, env.n_x))
    if workers is None or workers <= 1 or n < 2:
        return _solve_chunk((env, states, horizon, terminal, contexts, config))
    size = chunk or int(np.ceil(n / workers))
    jobs = []
    for s in range(0, n, size):
        c = None if contexts is None else contexts[s:s + size]
        jobs.append((env, states[s:s + size], horizon, terminal, c, config))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        out = list(pool.map(_solve_chunk, jobs))
    return tuple(np.concatenate([o[i] for o in out]) for i in range(4))


def bellman_targets(env, states, net=None, horizon=10, contexts=None, config=None, workers=1,
                    max_drop_fraction=0.2):
    """Dataset of ``B^[T](V)(x_j)``; non-converged solves are dropped and counted.

    ``net`` is a frozen ValueNetwork (or any terminal-cost object); None means
    the zero function.  Raises TrainingAborted when more than
    ``max_drop_fraction`` of the solves fail.
    """
    states = np.atleast_2d(np.asarray(states, float))
    terminal = net
    if isinstance(net, ValueNetwork):
        terminal = TerminalValue(net, env)
    cost, u0, ok, xT = solve_values(env, states, horizon, terminal, contexts, config, workers)
    dropped = int(np.sum(~ok))
    if states.shape[0] and dropped > max_drop_fraction * states.shape[0]:
        bad = np.flatnonzero(~ok)[:10]
        raise TrainingAborted(
            f"{dropped}/{states.shape[0]} OCP solves did not converge",
            diagnostics={"dropped": dropped, "total": int(states.shape[0]),
                         "example_states": states[bad].tolist()})
    ctx = None if contexts is None else np.asarray(contexts, float)[ok]
    # optimal costs are sums of nonnegative terms; clip rounding noise
    data = Dataset(env.net_input(states[ok], ctx), np.maximum(cost[ok], 0.0), states[ok], ctx, u0[ok],
                   xT[ok])
    return data, dropped


def ground_truth_value(env, states, contexts=None, horizon=200, config=None, workers=1):
    """Long-horizon optimal costs without terminal cost; returns ``(dataset, dropped)``."""
    return bellman_targets(env, states, None, horizon, contexts, config, workers, max_drop_fraction=1.0)


# -- fitting -----------------------------------------------------------------------

def _stationary_inputs(env, rng, m, contexts=None):
    if contexts is not None:
        xs = np.stack([env.stationary_sample(rng, c)[0] for c in contexts])
        return env.net_input(xs, contexts)
    if m == 0:
        return None
    xs = np.stack([env.stationary_sample(rng)[0] for _ in range(m)])
    return env.net_input(xs)


class _Batches:
    """Endless shuffled mini-batch index stream over one dataset."""

    def __init__(self, n, size, rng):
        self.n, self.size, self.rng = n, min(size, n), rng
        self.perm = rng.permutation(n)
        self.pos = 0

    def __next__(self):
        if self.pos + self.size > self.n:
            self.perm = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.perm[self.pos:self.pos + self.size]
        self.pos += self.size
        return idx

    def steps_per_epoch(self):
        return int(np.ceil(self.n / self.size))


def fit_value(net, data, cfg: TrainConfig, rng, env=None, m=0, optimizer=None, steps=None):
    """Minimize the anchored fitting loss with mini-batch AdamW; returns mean loss."""
    optimizer = optimizer or Adam.from_config(net.n_params, cfg)
    if len(data) == 0:
        return float("nan")
    batches = _Batches(len(data), cfg.batch_size, rng)
    if steps is None:
        steps = cfg.epochs * batches.steps_per_epoch() if cfg.epochs > 0 else cfg.steps
    theta = net.get_params()
    losses = []
    for _ in range(steps):
        idx = next(batches)
        zs = None
        if env is not None and cfg.alpha > 0:
            ctx = None if data.contexts is None else data.contexts[idx]
            zs = _stationary_inputs(env, rng, m, ctx)
        loss, grad = net.loss_and_param_gradient(data.inputs[idx], data.targets[idx], zs, cfg.alpha)
        if not np.isfinite(loss):
            raise TrainingAborted("non-finite training loss", diagnostics={"loss": loss})
        theta = optimizer.step(theta, grad)
        net.set_params(theta)
        losses.append(loss / len(idx))
    return float(np.mean(losses)) if losses else 0.0


def collect_rollout_data(env, net, starts, contexts=None, max_steps=60, horizon=10, config=None):
    """States visited by closed-loop MPC from ``starts`` until the goal or the cap.

    Rollouts whose solver fails are truncated at the failure; the prefix is kept.
    Returns ``(states, contexts)``.
    """
    config = SolverConfig.online() if config is None else config
    starts = np.atleast_2d(np.asarray(starts, float))
    if starts.shape[0] == 0 or max_steps <= 0:
        return np.zeros((0, env.n_x)), None if contexts is None else np.zeros((0, env.context_dim))
    terminal = TerminalValue(net, env) if isinstance(net, ValueNetwork) else net
    traces = mpc_rollout_batch(env, starts, terminal, horizon, max_steps, contexts, config,
                               stop_on_reach=True)
    xs, cs = [], []
    for tr in traces:
        if tr.infeasible:
            continue
        n = tr.steps
        bad = np.flatnonzero(tr.degraded & (tr.violations > config.violation_tolerance))
        if bad.size:
            n = int(bad[0])
        # visited states x_0..x_{n-1}; at most max_steps of them
        vis = tr.states[:max(n, 1)]
        if tr.reached and tr.reached_step == 0:
            vis = tr.states[:1]
        xs.append(vis)
        if tr.context is not None:
            cs.append(np.repeat(tr.context[None], len(vis), axis=0))
    states = np.concatenate(xs) if xs else np.zeros((0, env.n_x))
    ctx = np.concatenate(cs) if cs else (None if contexts is None else np.zeros((0, env.context_dim)))
    return states, ctx


# -- main loop ----------------------------------------------------------------------

def value_iteration(env, cfg: ViConfig, seed=0, solver_config=None, workers=1, metrics_path=None,
                    checkpoint_dir=None, callback=None, timing_path=None):
    """Run fitted value iteration; returns ``(net, metrics)``.

    ``metrics`` is a list of dicts, one per iteration.  When given,
    ``metrics_path`` receives the METRIC_FIELDS columns and ``timing_path``
    the TIMING_FIELDS columns, appended row by row.  ``callback(k, net, row)``
    is called after every iteration.
    """
    rng = np.random.default_rng(seed)
    solver_config = SolverConfig.offline() if solver_config is None else solver_config
    net = ValueNetwork.build(env.input_dim, cfg.hidden, cfg.d, rng)
    opt = Adam.from_config(net.n_params, cfg.train)
    metrics = []
    sinks = []
    for path, names in ((metrics_path, METRIC_FIELDS), (timing_path, TIMING_FIELDS)):
        if path is not None:
            fh = open(path, "w", newline="", encoding="utf-8")
            writer = csv.DictWriter(fh, fieldnames=names, extrasaction="ignore")
            writer.writeheader()
            sinks.append((fh, writer))
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    try:
        for k in range(cfg.iterations):
            x, ctx = env.sample_state(rng, cfg.samples)
            frozen = None if k == 0 else net.copy()
            if cfg.rollout and frozen is not None and cfg.rollout_starts > 0:
                s0, c0 = env.sample_state(rng, cfg.rollout_starts)
                xr, cr = collect_rollout_data(env, frozen, s0, c0, cfg.rollout_steps, cfg.horizon)
                x = np.concatenate([x, xr])
                ctx = None if ctx is None else np.concatenate([ctx, cr])
            t0 = time.perf_counter()
            data, dropped = bellman_targets(env, x, frozen, cfg.horizon, ctx, solver_config, workers,
                                            cfg.max_drop_fraction)
            if cfg.augment_last and len(data):
                extra, d2 = bellman_targets(env, data.final_states, frozen, cfg.horizon, data.contexts,
                                            solver_config, workers, 1.0)
                data = Dataset.concat([data, extra])
                dropped += d2
            t1 = time.perf_counter()
            residual = float(np.mean(np.abs(net.value(data.inputs) - data.targets))) if len(data) else 0.0
            loss = fit_value(net, data, cfg.train, rng, env, cfg.stationary, opt)
            t2 = time.perf_counter()
            z_stat = _stationary_inputs(env, rng, 1, None if ctx is None else ctx[:1])
            row = {"iteration": k + 1, "targets": len(data), "dropped": dropped,
                   "bellman_residual": residual, "loss": loss, "mean_target": float(np.mean(data.targets)),
                   "v_stationary": float(np.max(net.value(z_stat))), "solve_time": t1 - t0,
                   "fit_time": t2 - t1}
            metrics.append(row)
            for fh, writer in sinks:
                writer.writerow(row)
                fh.flush()
            log.info("iteration %d: residual %.4g loss %.4g dropped %d", k + 1, residual, loss, dropped)
            if checkpoint_dir is not None and cfg.checkpoint_every and (k + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(net, Path(checkpoint_dir) / f"value_{k + 1:05d}.json",
                                meta={"env": env.name, "iteration": k + 1})
            if callback is not None:
                callback(k, net, row)
    finally:
        for fh, _ in sinks:
            fh.close()
    return net, metrics


# -- baselines ------------------------------------------------------------------------

def train_supervised_value(data: Dataset, cfg: TrainConfig, hidden=(64, 64, 64), d=64, seed=0,
                           env=None, m=0, steps=None):
    """Plain regression of a value network onto ground-truth values."""
    rng = np.random.default_rng(seed)
    net = ValueNetwork.build(data.inputs.shape[1], hidden, d, rng)
    if steps is None and cfg.epochs <= 0:
        steps = cfg.steps
    fit_value(net, data, cfg, rng, env, m, steps=steps)
    return net


def train_policy(data: Dataset, cfg: TrainConfig, hidden=(64, 64, 64), seed=0, steps=None):
    """MSE regression of first optimal controls; the "horizon 0" controller."""
    if data.controls is None:
        raise ValueError("dataset has no controls")
    rng = np.random.default_rng(seed)
    y = np.asarray(data.controls, float).reshape(len(data), -1)
    net = PolicyNetwork.build(data.inputs.shape[1], y.shape[1], hidden, rng)
    opt = Adam.from_config(net.n_params, cfg)
    batches = _Batches(len(data), cfg.batch_size, rng)
    if steps is None:
        steps = cfg.epochs * batches.steps_per_epoch() if cfg.epochs > 0 else cfg.steps
    theta = net.get_params()
    for _ in range(steps):
        idx = next(batches)
        _, grad = net.loss_and_param_gradient(data.inputs[idx], y[idx])
        theta = opt.step(theta, grad)
        net.set_params(theta)
    return net


class PolicyController:
    """Adapter so a PolicyNetwork can drive ``mpc_rollout_batch`` at horizon 0."""

    def __init__(self, net: PolicyNetwork, env):
        self.net, self.env = net, env

    def __call__(self, x, ctx=None):
        return self.net(self.env.net_input(x, ctx))
