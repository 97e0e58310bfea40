"""Run configuration: per-environment defaults, YAML files and flag overrides.

A config file is a YAML mapping with these optional sections::

    env:      {name: point, dt: 0.02, target: [0.6, 0.0],
               obstacle: {center: [0, 0], half_extents: [0.3, 0.15], radius: 0.05}}
    vi:       {iterations, samples, stationary, horizon, hidden, d, rollout,
               rollout_starts, rollout_steps, max_drop_fraction, checkpoint_every,
               augment_last}
    train:    {lr, weight_decay, batch_size, steps, epochs, alpha, beta1, beta2, eps}
    solver:   {max_sqp_iterations, kkt_tolerance, max_qp_iterations, qp_tolerance,
               violation_tolerance, dynamics_tolerance, armijo, backtrack_factor,
               max_backtracks}
    online:   same keys as solver; used by MPC rollouts
    eval:     {horizon, rollouts, steps, start}   start: fixed initial state or null (sampled)
    study:    {horizons, iterations, heldout, gt_horizon, rollouts, steps}
    seed:     0
    workers:  4              # default: number of logical cores

Unknown keys raise ConfigError naming the offending key.  Command-line flags
override file values, which override the compiled-in defaults.
"""
from __future__ import annotations

import copy
from dataclasses import fields
from pathlib import Path

import yaml

from .envs import ENV_NAMES
from .errors import ConfigError
from .solver import SolverConfig
from .training import ViConfig
from .valuenet import TrainConfig

_BASE = {
    "vi": {},
    "train": {},
    "solver": {},
    "online": {},
    "eval": {"horizon": 10, "rollouts": 100, "steps": 400, "start": None},
    "study": {"horizons": None, "iterations": 50, "heldout": 500, "gt_horizon": 200,
              "rollouts": 100, "steps": 200},
    "seed": 0,
    "workers": None,         # None: one per logical core
}

# per-environment defaults; pendulum and point follow the published settings
ENV_DEFAULTS = {
    "lqr1d": {
        "vi": {"iterations": 200, "samples": 200, "horizon": 1, "hidden": [32, 32], "d": 16},
        "train": {"steps": 200},
        "eval": {"horizon": 1, "steps": 50},
    },
    "pendulum": {
        "vi": {"iterations": 1000, "samples": 500, "horizon": 10, "hidden": [64, 64, 64], "d": 64},
        "train": {"steps": 80},
        # Gauss-Newton SQP converges linearly on swing-up problems; 20 iterations drop too many
        "solver": {"max_sqp_iterations": 40},
        "eval": {"horizon": 20, "steps": 300, "rollouts": 1, "start": [0.0, 0.0]},
    },
    "point": {
        "vi": {"iterations": 100, "samples": 2500, "horizon": 10, "hidden": [32, 32, 32], "d": 32,
               "augment_last": True},
        "train": {"steps": 2000},
        "eval": {"horizon": 10, "steps": 400},
    },
    "point_free": {
        "vi": {"iterations": 50, "samples": 1000, "horizon": 10, "hidden": [32, 32, 32], "d": 32},
        "train": {"steps": 500},
        "eval": {"horizon": 10, "steps": 200},
    },
    "point_cond": {
        "vi": {"iterations": 100, "samples": 1000, "horizon": 5, "hidden": [64, 64, 64, 64], "d": 64,
               "rollout": True, "rollout_starts": 100, "rollout_steps": 60},
        "train": {"steps": 500, "alpha": 0.01, "lr": 4e-4, "weight_decay": 1e-5},
        "eval": {"horizon": 10, "steps": 400, "rollouts": 200},
    },
}

_SECTION_KEYS = {
    "vi": {f.name for f in fields(ViConfig)} - {"train"},
    "train": {f.name for f in fields(TrainConfig)},
    "solver": {f.name for f in fields(SolverConfig)},
    "online": {f.name for f in fields(SolverConfig)},
    "eval": {"horizon", "rollouts", "steps", "start"},
    "study": {"horizons", "iterations", "heldout", "gt_horizon", "rollouts", "steps"},
}
_TOP_KEYS = set(_SECTION_KEYS) | {"env", "seed", "workers"}


def _merge(dst, src, where=""):
    for key, val in src.items():
        if isinstance(val, dict) and isinstance(dst.get(key), dict):
            _merge(dst[key], val, f"{where}{key}.")
        else:
            dst[key] = copy.deepcopy(val)
    return dst


def validate(doc):
    """Reject unknown sections and keys; returns the document."""
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a mapping", key="<root>")
    for key, val in doc.items():
        if key not in _TOP_KEYS:
            raise ConfigError(f"unknown configuration section '{key}'", key=key)
        if key in _SECTION_KEYS:
            if val is None:
                continue
            if not isinstance(val, dict):
                raise ConfigError(f"section '{key}' must be a mapping", key=key)
            for sub in val:
                if sub not in _SECTION_KEYS[key]:
                    raise ConfigError(f"unknown key '{key}.{sub}'", key=f"{key}.{sub}")
    env = doc.get("env")
    if env is not None and not isinstance(env, (dict, str)):
        raise ConfigError("'env' must be a name or a mapping", key="env")
    return doc


def load_file(path):
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f":{mark.line + 1}:{mark.column + 1}" if mark else ""
        raise ConfigError(f"{path}{where}: {exc}", key="<file>") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}", key="--config") from None
    return validate(doc or {})


def resolve(env_name=None, file_doc=None, overrides=None):
    """Merge defaults, file values and overrides into one plain dict."""
    file_doc = copy.deepcopy(file_doc or {})
    env_doc = file_doc.pop("env", None)
    if isinstance(env_doc, str):
        env_doc = {"name": env_doc}
    env_doc = dict(env_doc or {})
    name = env_name or env_doc.pop("name", None)
    env_doc.pop("name", None)
    if name is None:
        raise ConfigError("no environment given (use --env or env.name)", key="env")
    if name not in ENV_NAMES:
        raise ConfigError(f"unknown environment '{name}' (choose from {', '.join(ENV_NAMES)})", key="env")
    cfg = copy.deepcopy(_BASE)
    _merge(cfg, ENV_DEFAULTS[name])
    _merge(cfg, file_doc)
    _merge(cfg, overrides or {})
    validate({k: v for k, v in cfg.items()})
    cfg["env"] = {"name": name, "params": env_doc}
    return cfg


def vi_config(cfg):
    vi = dict(cfg["vi"])
    return ViConfig(**vi, train=TrainConfig(**cfg["train"]))


def solver_config(cfg, online=False):
    base = SolverConfig.online() if online else SolverConfig.offline()
    params = base.to_dict()
    params.update(cfg["online" if online else "solver"])
    try:
        return SolverConfig(**params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), key="online" if online else "solver") from None
