"""Closed-loop receding-horizon control with an optional learned terminal value.

Rollouts from many start states advance in lock step: at every control step
the still-running OCPs are solved as one batch, each warm-started from its own
previous solution shifted by one stage.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .solver import OcpProblem, SolverConfig, solve_batch, solve_ocp, shift_warm_start

REACH_COST = 0.1


@dataclass
class MpcTrace:
    """Record of one closed-loop rollout."""

    states: np.ndarray
    controls: np.ndarray
    costs: np.ndarray
    violations: np.ndarray
    iterations: np.ndarray
    solve_times: np.ndarray
    degraded: np.ndarray
    reached: bool = False
    reached_step: int = -1
    infeasible: bool = False
    context: np.ndarray | None = None
    notes: list = field(default_factory=list)

    @property
    def steps(self):
        return len(self.costs)

    @property
    def cumulative_cost(self):
        return float(np.sum(self.costs))

    @property
    def max_violation(self):
        return float(np.max(self.violations, initial=0.0))

    def summary(self):
        return {"steps": self.steps, "cumulative_cost": self.cumulative_cost, "reached": self.reached,
                "reached_step": self.reached_step, "max_violation": self.max_violation,
                "mean_solve_time": float(np.mean(self.solve_times)) if self.steps else 0.0,
                "degraded_steps": int(np.sum(self.degraded)), "infeasible": self.infeasible}


def _violation(env, x, u, x_next, ctx):
    v = np.zeros(x.shape[0])
    if env.n_c:
        v = np.maximum(v, np.max(-env.constraint(x, u, ctx), axis=-1))
    if env.n_omega:
        v = np.maximum(v, np.max(-env.omega_constraint(x_next, ctx), axis=-1))
    return np.maximum(v, 0.0)


def _infeasible_start(env, x, ctx, tol):
    if not env.n_omega:
        return np.zeros(x.shape[0], bool)
    return np.min(env.omega_constraint(x, ctx), axis=-1) < -tol


def mpc_step(env, x, terminal, horizon, config=None, warm_start=None, context=None):
    """Solve the lookahead problem at ``x`` and return ``(u0, result, degraded)``.

    ``degraded`` is True when the solver stopped before convergence; the first
    control of its best iterate is returned anyway.
    """
    config = SolverConfig.online() if config is None else config
    x = np.asarray(x, float)
    if env.n_omega and np.min(env.omega_constraint(x, context)) < -config.violation_tolerance:
        raise ContractError(f"state {x} lies outside the feasible set")
    res = solve_ocp(OcpProblem(env, horizon, x, terminal, context), config, warm_start)
    return res.trajectory.controls[0].copy(), res, not res.converged


def mpc_rollout_batch(env, x0, terminal, horizon, steps, contexts=None, config=None, stop_on_reach=False):
    """Closed-loop rollouts from each row of ``x0``; returns a list of MpcTrace.

    ``terminal=None`` is the baseline controller without terminal cost.
    With ``horizon=0`` the ``terminal`` argument must be a policy callable
    ``policy(x, ctx) -> u`` which is applied directly (clipped to control bounds
    by the environment constraint if it has one).
    """
    config = SolverConfig.online() if config is None else config
    x0 = np.atleast_2d(np.asarray(x0, float))
    nb = x0.shape[0]
    ctx = None if contexts is None else np.atleast_2d(np.asarray(contexts, float))
    xs = np.zeros((nb, steps + 1, env.n_x))
    us = np.zeros((nb, steps, env.n_u))
    costs = np.zeros((nb, steps))
    viol = np.zeros((nb, steps))
    iters = np.zeros((nb, steps), int)
    times = np.zeros((nb, steps))
    degraded = np.zeros((nb, steps), bool)
    reached_step = np.full(nb, -1)
    length = np.full(nb, steps)
    xs[:, 0] = x0

    infeasible = _infeasible_start(env, x0, ctx, config.violation_tolerance)
    length[infeasible] = 0
    running = ~infeasible
    warm_x = warm_u = None
    x = x0.copy()
    for k in range(steps):
        idx = np.flatnonzero(running)
        if idx.size == 0:
            break
        c = None if ctx is None else ctx[idx]
        t0 = time.perf_counter()
        if horizon == 0:
            u0 = np.asarray(terminal(x[idx], c), float).reshape(idx.size, env.n_u)
            u0 = _clip_to_bounds(env, u0)
            it = np.zeros(idx.size, int)
            bad = np.zeros(idx.size, bool)
        else:
            ws = None if warm_x is None else warm_x[idx]
            wu = None if warm_u is None else warm_u[idx]
            sol = solve_batch(env, x[idx], horizon, terminal, c, config, ws, wu)
            u0 = sol.controls[:, 0]
            it = sol.iterations
            bad = ~sol.converged
            if warm_x is None:
                warm_x = np.zeros((nb, horizon + 1, env.n_x))
                warm_u = np.zeros((nb, horizon, env.n_u))
        dt = (time.perf_counter() - t0) / idx.size
        x_next = env.dynamics(x[idx], u0, c)
        if horizon > 0:
            warm_x[idx], warm_u[idx] = shift_warm_start(sol.states, sol.controls, x_next)
        costs[idx, k] = env.stage_cost(x[idx], u0, c)
        viol[idx, k] = _violation(env, x[idx], u0, x_next, c)
        iters[idx, k] = it
        times[idx, k] = dt
        degraded[idx, k] = bad
        us[idx, k] = u0
        xs[idx, k + 1] = x_next
        x[idx] = x_next
        hit = idx[(costs[idx, k] < REACH_COST) & (reached_step[idx] < 0)]
        reached_step[hit] = k
        if stop_on_reach:
            length[hit] = k + 1
            running[hit] = False

    traces = []
    for i in range(nb):
        n = length[i]
        traces.append(MpcTrace(
            states=xs[i, :n + 1], controls=us[i, :n], costs=costs[i, :n], violations=viol[i, :n],
            iterations=iters[i, :n], solve_times=times[i, :n], degraded=degraded[i, :n],
            reached=bool(reached_step[i] >= 0), reached_step=int(reached_step[i]),
            infeasible=bool(infeasible[i]), context=None if ctx is None else ctx[i],
            notes=["initial state outside the feasible set"] if infeasible[i] else []))
    return traces


def mpc_rollout(env, x0, terminal, horizon, steps, context=None, config=None, stop_on_reach=False):
    """Single closed-loop rollout; see ``mpc_rollout_batch``."""
    ctx = None if context is None else np.asarray(context, float)[None]
    return mpc_rollout_batch(env, np.asarray(x0, float)[None], terminal, horizon, steps, ctx,
                             config, stop_on_reach)[0]


def _clip_to_bounds(env, u):
    lo, hi = env.control_bounds()
    if lo is None and hi is None:
        return u
    return np.clip(u, -np.inf if lo is None else lo, np.inf if hi is None else hi)


def summarize(traces):
    """Aggregate statistics over a list of traces (empty list gives zeros)."""
    ok = [t for t in traces if not t.infeasible]
    if not ok:
        return {"rollouts": len(traces), "mean_cost": 0.0, "reach_rate": 0.0, "max_violation": 0.0,
                "mean_solve_time": 0.0, "infeasible": len(traces) - len(ok)}
    return {"rollouts": len(traces),
            "mean_cost": float(np.mean([t.cumulative_cost for t in ok])),
            "reach_rate": float(np.mean([t.reached for t in ok])),
            "max_violation": float(max(t.max_violation for t in ok)),
            "mean_solve_time": float(np.mean([t.summary()["mean_solve_time"] for t in ok])),
            "infeasible": len(traces) - len(ok)}


def trace_rows(trace, rollout_id=0):
    """One dict per step, for CSV export."""
    rows = []
    for k in range(trace.steps):
        row = {"rollout": rollout_id, "step": k}
        row.update({f"x{i}": float(v) for i, v in enumerate(trace.states[k])})
        row.update({f"u{i}": float(v) for i, v in enumerate(trace.controls[k])})
        row.update(cost=float(trace.costs[k]), violation=float(trace.violations[k]),
                   iterations=int(trace.iterations[k]), solve_time=float(trace.solve_times[k]),
                   degraded=int(trace.degraded[k]))
        rows.append(row)
    return rows


def write_trace_csv(trace, path):
    rows = trace_rows(trace)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if rows:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
