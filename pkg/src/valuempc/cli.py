"""Command-line entry point: ``valuempc {train,eval,horizon-study}``.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure
(training abort, non-finite values).  A failed training run leaves
``diagnostics.json`` in its output directory.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import report
from .envs import ENV_NAMES, make_env
from .errors import CheckpointError, ConfigError, ContractError, DimensionError, NumericalError, TrainingAborted
from .mpc import mpc_rollout_batch, summarize, trace_rows
from .training import (PolicyController, ground_truth_value, solve_values, train_policy,
                       train_supervised_value, value_iteration)
from .valuenet import TerminalValue, load_checkpoint, save_checkpoint

log = logging.getLogger("valuempc")

EXIT_USAGE = 2
EXIT_NUMERICAL = 3


class UsageError(Exception):
    pass


def _int_list(text):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got '{text}'") from None
    return vals


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated numbers, got '{text}'") from None


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--env", choices=ENV_NAMES, help="environment name")
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int, help="random seed (default 0)")
    common.add_argument("--workers", type=int, help="solver processes (default: logical cores)")
    common.add_argument("--out", help="output directory (default runs/<command>-<env>)")
    common.add_argument("--no-figures", action="store_true", help="skip rendering PNG figures")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="valuempc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="fitted value iteration")
    t.add_argument("--iters", type=int, help="value iterations N")
    t.add_argument("--horizon", type=int, help="training horizon T")
    t.add_argument("--alpha", type=float, help="stationary anchor weight")
    t.add_argument("--samples", type=int, help="states per iteration n")

    e = sub.add_parser("eval", parents=[common], help="closed-loop MPC rollouts")
    e.add_argument("--checkpoint", required=True, help="value checkpoint, or 'none' for no terminal cost")
    e.add_argument("--horizon", type=int, help="MPC horizon")
    e.add_argument("--rollouts", type=int, help="number of start states")
    e.add_argument("--steps", type=int, help="closed-loop steps per rollout")
    e.add_argument("--start", type=_float_list, help="fixed start state, e.g. 0,0")
    e.add_argument("--ood", action="store_true", help="obstacle centers outside the training box (point_cond)")

    h = sub.add_parser("horizon-study", parents=[common], help="horizon at train or test time")
    h.add_argument("--mode", choices=("train", "test"), required=True)
    h.add_argument("--horizons", type=_int_list, help="comma separated horizons (0 = policy in test mode)")
    h.add_argument("--iters", type=int, help="value iterations per training run")
    h.add_argument("--checkpoint", help="VI checkpoint for test mode (default: train one)")
    h.add_argument("--rollouts", type=int, help="number of start states (test mode)")
    h.add_argument("--steps", type=int, help="closed-loop steps (test mode)")
    h.add_argument("--samples", type=int, help="states per iteration n")
    return p


def _overrides(args):
    o = {}

    def put(section, key, val):
        if val is not None:
            o.setdefault(section, {})[key] = val

    if args.seed is not None:
        o["seed"] = args.seed
    if args.workers is not None:
        o["workers"] = args.workers
    if args.command == "train":
        put("vi", "iterations", args.iters)
        put("vi", "horizon", args.horizon)
        put("train", "alpha", args.alpha)
        put("vi", "samples", args.samples)
    elif args.command == "eval":
        put("eval", "horizon", args.horizon)
        put("eval", "rollouts", args.rollouts)
        put("eval", "steps", args.steps)
        put("eval", "start", args.start)
    else:
        put("study", "horizons", args.horizons)
        put("study", "iterations", args.iters)
        put("study", "rollouts", args.rollouts)
        put("study", "steps", args.steps)
        put("vi", "samples", args.samples)
    return o


def _setup(args):
    file_doc = cfgmod.load_file(args.config) if args.config else None
    cfg = cfgmod.resolve(args.env, file_doc, _overrides(args))
    if cfg.get("workers") is None:
        cfg["workers"] = os.cpu_count() or 1
    if cfg["workers"] < 1:
        raise ConfigError("workers must be >= 1", key="workers")
    env = make_env(cfg["env"]["name"], cfg["env"]["params"])
    out = Path(args.out or Path("runs") / f"{args.command}-{env.name}")
    manifest = report.make_manifest(args.command, env.name, cfg, cfg["seed"], out)
    digest = report.write_manifest(out, manifest)
    return cfg, env, out, digest


def cmd_train(args):
    cfg, env, out, digest = _setup(args)
    vi = cfgmod.vi_config(cfg)
    ckpt_dir = out / "checkpoints"
    try:
        net, metrics = value_iteration(env, vi, seed=cfg["seed"], solver_config=cfgmod.solver_config(cfg),
                                       workers=cfg["workers"], metrics_path=out / "metrics.csv",
                                       checkpoint_dir=ckpt_dir, timing_path=out / "timing.csv")
    except TrainingAborted as exc:
        _diagnostics(out, "train", exc)
        raise
    final = save_checkpoint(net, out / "value.json", meta={"env": env.name, "iteration": vi.iterations,
                                                            "manifest_sha256": digest})
    for name in ("metrics.csv", "timing.csv"):
        report.append_footer(out / name, digest)
    if not args.no_figures and metrics:
        report.plot_training(metrics, out / "training.png")
    last = metrics[-1] if metrics else {}
    print(f"checkpoint: {final}")
    print(f"iterations: {len(metrics)}  final bellman residual: {last.get('bellman_residual', float('nan')):.6g}"
          f"  dropped (last): {last.get('dropped', 0)}")
    return 0


def _diagnostics(out, command, exc):
    info = {"command": command, "error": str(exc), "type": type(exc).__name__}
    info.update(getattr(exc, "diagnostics", {}) or {})
    Path(out).mkdir(parents=True, exist_ok=True)
    (Path(out) / "diagnostics.json").write_text(json.dumps(info, indent=2, default=str) + "\n",
                                                encoding="utf-8")


def _terminal(env, checkpoint):
    if checkpoint is None or str(checkpoint).lower() == "none":
        return None
    net = load_checkpoint(checkpoint, input_dim=env.input_dim)
    return TerminalValue(net, env)


def _starts(env, rng, n, start=None, ood=False):
    if start is not None:
        x = np.asarray(start, float)
        if x.shape != (env.n_x,):
            raise UsageError(f"--start needs {env.n_x} values, got {x.size}")
        ctx = env.default_context(n) if env.context_dim else None
        return np.tile(x, (n, 1)), ctx
    if ood:
        if not hasattr(env, "sample_ood_state"):
            raise UsageError(f"--ood is not available for environment '{env.name}'")
        return env.sample_ood_state(rng, n)
    if n == 0:
        return np.zeros((0, env.n_x)), (np.zeros((0, env.context_dim)) if env.context_dim else None)
    return env.sample_state(rng, n)


def _rollout_table(traces):
    rows = []
    for i, tr in enumerate(traces):
        rows.extend(trace_rows(tr, i))
    return rows


def cmd_eval(args):
    cfg, env, out, digest = _setup(args)
    ev = cfg["eval"]
    rng = np.random.default_rng(cfg["seed"])
    terminal = _terminal(env, args.checkpoint)
    n = int(ev["rollouts"])
    if n < 0:
        raise UsageError("--rollouts must be >= 0")
    start = args.start if args.start is not None else ev.get("start")
    x0, ctx = _starts(env, rng, n, None if args.ood else start, args.ood)
    online = cfgmod.solver_config(cfg, online=True)
    traces = mpc_rollout_batch(env, x0, terminal, ev["horizon"], ev["steps"], ctx, online) if n else []
    rows = _rollout_table(traces)
    fields = list(rows[0]) if rows else ["rollout", "step"]
    # per-step wall time goes to its own file; the trace table stays reproducible
    report.write_csv(out / "traces.csv", rows, [f for f in fields if f != "solve_time"], digest)
    report.write_csv(out / "timing.csv", rows, ["rollout", "step", "solve_time"], digest)
    per = [dict(rollout=i, start=" ".join(f"{v:.6g}" for v in tr.states[0]), **{
        k: v for k, v in tr.summary().items() if k != "mean_solve_time"}) for i, tr in enumerate(traces)]
    report.write_csv(out / "rollouts.csv", per,
                     ["rollout", "start", "steps", "cumulative_cost", "reached", "reached_step",
                      "max_violation", "degraded_steps", "infeasible"], digest)
    summary = summarize(traces)
    summary.update(horizon=ev["horizon"], checkpoint=str(args.checkpoint))
    report.write_csv(out / "summary.csv", [{k: v for k, v in summary.items() if k != "mean_solve_time"}],
                     None, digest)
    if not args.no_figures and traces:
        report.plot_rollouts(env, traces, out / "rollouts.png")
    print(f"rollouts: {summary['rollouts']}  mean cost: {summary['mean_cost']:.6g}  "
          f"reach rate: {summary['reach_rate']:.3f}  max violation: {summary['max_violation']:.3g}")
    return 0


def cmd_horizon_study(args):
    cfg, env, out, digest = _setup(args)
    study = cfg["study"]
    horizons = study.get("horizons")
    if horizons is None:
        horizons = [1, 10] if args.mode == "train" else [0, 1, 5, 10]
    if not horizons:
        raise UsageError("horizon list is empty")
    if any(h < 0 for h in horizons) or (args.mode == "train" and any(h < 1 for h in horizons)):
        raise UsageError("horizons must be >= 1 in train mode and >= 0 in test mode")
    if args.mode == "train":
        rows = horizon_train_study(env, cfg, horizons, study["iterations"], study["heldout"],
                                   study["gt_horizon"], cfg["seed"], cfg["workers"])
        report.write_csv(out / "horizon_train.csv", rows, ["horizon", "iteration", "mse"], digest)
        if not args.no_figures:
            report.plot_horizon_train(rows, out / "horizon_train.png")
        for T in horizons:
            last = [r for r in rows if r["horizon"] == T][-1]
            print(f"T={T}: held-out MSE after {last['iteration']} iterations = {last['mse']:.6g}")
    else:
        rows = horizon_test_study(env, cfg, horizons, args.checkpoint, cfg["seed"], cfg["workers"], out)
        report.write_csv(out / "horizon_test.csv", rows,
                         ["value", "horizon", "rollouts", "mean_cost", "gt_cost", "cost_gap", "reach_rate",
                          "max_violation"], digest)
        if not args.no_figures:
            report.plot_horizon_test(rows, out / "horizon_test.png")
        for r in rows:
            print(f"{r['value']:>10s} horizon {r['horizon']:>3d}: cost gap {r['cost_gap']:.6g}")
    return 0


def horizon_train_study(env, cfg, horizons, iterations, heldout, gt_horizon, seed, workers=1):
    """Held-out MSE against long-horizon ground truth after every VI iteration, per training horizon."""
    rng = np.random.default_rng(seed + 1)
    xh, ch = env.sample_state(rng, heldout)
    gt, dropped = ground_truth_value(env, xh, ch, gt_horizon, cfgmod.solver_config(cfg), workers)
    if dropped:
        log.warning("%d ground-truth solves dropped", dropped)
    rows = []
    for T in horizons:
        vi = cfgmod.vi_config(cfg)
        vi.horizon, vi.iterations = int(T), int(iterations)

        def record(k, net, row, T=T):
            err = net.value(gt.inputs) - gt.targets
            rows.append({"horizon": T, "iteration": k + 1, "mse": float(np.mean(err ** 2))})

        value_iteration(env, vi, seed=seed, solver_config=cfgmod.solver_config(cfg), workers=workers,
                        callback=record)
    return rows


def horizon_test_study(env, cfg, horizons, checkpoint, seed, workers=1, out=None):
    """Mean closed-loop cost gap to the long-horizon optimum for each test horizon.

    Three controllers share the comparison: the VI value network (from
    ``checkpoint``, or trained with the configured VI settings), a value
    network regressed on ground-truth values, and a policy network regressed
    on ground-truth first controls (horizon 0).  The supervised nets get the
    same number of SGD steps as the VI run.  The reference cost of a start is
    the optimal cost of the horizon ``gt_horizon`` problem without terminal
    cost, i.e. the cost of the ground-truth controller.
    """
    study = cfg["study"]
    vi = cfgmod.vi_config(cfg)
    solver = cfgmod.solver_config(cfg)
    online = cfgmod.solver_config(cfg, online=True)
    rng = np.random.default_rng(seed + 2)
    if checkpoint:
        vi_net = load_checkpoint(checkpoint, input_dim=env.input_dim)
    else:
        vi_net, _ = value_iteration(env, vi, seed=seed, solver_config=solver, workers=workers)
        if out is not None:
            save_checkpoint(vi_net, Path(out) / "value_vi.json", meta={"env": env.name})
    xs, cs = env.sample_state(rng, vi.samples)
    data, _ = ground_truth_value(env, xs, cs, study["gt_horizon"], solver, workers)
    steps = vi.iterations * (vi.train.steps if vi.train.epochs <= 0 else
                             vi.train.epochs * int(np.ceil(vi.samples / vi.train.batch_size)))
    sup_net = train_supervised_value(data, vi.train, vi.hidden, vi.d, seed, env, vi.stationary, steps=steps)
    pol_net = train_policy(data, vi.train, vi.hidden, seed, steps=steps)
    if out is not None:
        save_checkpoint(sup_net, Path(out) / "value_supervised.json", meta={"env": env.name})
        save_checkpoint(pol_net, Path(out) / "policy.json", meta={"env": env.name})

    x0, c0 = env.sample_state(rng, study["rollouts"])
    ref, _, keep, _ = solve_values(env, x0, study["gt_horizon"], None, c0, solver, workers)
    # only starts whose reference solve converged are compared
    x0 = x0[keep]
    c0 = None if c0 is None else c0[keep]
    gt_cost = float(np.mean(ref[keep])) if keep.any() else 0.0

    rows = []
    for h in horizons:
        if h == 0:
            runs = [("policy", PolicyController(pol_net, env))]
        else:
            runs = [("vi", TerminalValue(vi_net, env)), ("supervised", TerminalValue(sup_net, env))]
        for name, ctrl in runs:
            traces = mpc_rollout_batch(env, x0, ctrl, h, study["steps"], c0, online)
            s = summarize(traces)
            rows.append({"value": name, "horizon": int(h), "rollouts": s["rollouts"],
                         "mean_cost": s["mean_cost"], "gt_cost": gt_cost,
                         "cost_gap": s["mean_cost"] - gt_cost, "reach_rate": s["reach_rate"],
                         "max_violation": s["max_violation"]})
    return rows


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "horizon-study": cmd_horizon_study}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError, CheckpointError, DimensionError, ContractError) as exc:
        print(f"valuempc {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingAborted, NumericalError) as exc:
        print(f"valuempc {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
