"""Environment-model abstraction, trajectories, rollout and linearization.

All model functions are vectorized: states have shape ``(..., n_x)``, controls
``(..., n_u)`` and optional context vectors ``(..., context_dim)``; any leading
batch shape is allowed as long as the three broadcast against each other.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericalError

FD_STEP = 1e-6


def _central_jacobian(fun, z, step=FD_STEP):
    """Central-difference Jacobian of ``fun`` w.r.t. the last axis of ``z``.

    Returns an array of shape ``(..., m, n)`` where ``m`` is the output size.
    """
    z = np.asarray(z, dtype=float)
    cols = []
    for i in range(z.shape[-1]):
        zp = z.copy()
        zm = z.copy()
        zp[..., i] += step
        zm[..., i] -= step
        cols.append((np.asarray(fun(zp)) - np.asarray(fun(zm))) / (2.0 * step))
    return np.stack(cols, axis=-1)


class EnvModel:
    """Base class of a discrete-time constrained optimal-control model.

    Subclasses define ``dynamics``, ``cost_residual`` (the stage cost is the
    squared norm of this residual), ``constraint`` (``c(x, u) >= 0``),
    ``omega_constraint`` (``c_omega(x) >= 0`` describes the feasible set),
    the samplers and the network input map.  Derivative methods fall back to
    central finite differences when a subclass does not override them.
    """

    name = "env"
    n_x = 0
    n_u = 0
    n_c = 0
    n_omega = 0
    context_dim = 0
    dt = 1.0
    goal_cost = 0.1

    # -- model functions ---------------------------------------------------
    def dynamics(self, x, u, ctx=None):
        raise NotImplementedError

    def cost_residual(self, x, u, ctx=None):
        raise NotImplementedError

    def stage_cost(self, x, u, ctx=None):
        r = self.cost_residual(x, u, ctx)
        return np.sum(r * r, axis=-1)

    def constraint(self, x, u, ctx=None):
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1])
        return np.zeros(shape + (0,))

    def omega_constraint(self, x, ctx=None):
        return np.zeros(np.shape(x)[:-1] + (0,))

    # -- derivatives (finite-difference defaults) --------------------------
    def dynamics_jac(self, x, u, ctx=None):
        x, u = np.asarray(x, float), np.asarray(u, float)
        A =_central_jacobian(lambda z: self.dynamics(z, u, ctx), x)
        B = _central_jacobian(lambda w: self.dynamics(x, w, ctx), u)
        return A, B

    def cost_residual_jac(self, x, u, ctx=None):
        x, u = np.asarray(x, float), np.asarray(u, float)
        Rx = _central_jacobian(lambda z: self.cost_residual(z, u, ctx), x)
        Ru = _central_jacobian(lambda w: self.cost_residual(x, w, ctx), u)
        return Rx, Ru

    def constraint_jac(self, x, u, ctx=None):
        x, u = np.asarray(x, float), np.asarray(u, float)
        Cx = _central_jacobian(lambda z: self.constraint(z, u, ctx), x)
        Cu = _central_jacobian(lambda w: self.constraint(x, w, ctx), u)
        return Cx, Cu

    def omega_jac(self, x, ctx=None):
        return _central_jacobian(lambda z: self.omega_constraint(z, ctx), np.asarray(x, float))

    # -- sampling ----------------------------------------------------------
    def stationary_sample(self, rng, ctx=None):
        """Return ``(x, u)`` from the zero-cost stationary set."""
        raise NotImplementedError

    def sample_state(self, rng, n=None):
        """Draw training states; returns ``(x, ctx)`` with ``ctx`` None when unconditioned."""
        raise NotImplementedError

    # -- network input -----------------------------------------------------
    @property
    def input_dim(self):
        return self.n_x + self.context_dim

    def net_input(self, x, ctx=None):
        x = np.asarray(x, float)
        if self.context_dim:
            return np.concatenate([x, np.asarray(ctx, float)], axis=-1)
        return x

    def net_input_jac(self, x, ctx=None):
        """Jacobian of ``net_input`` w.r.t. the state, shape ``(..., input_dim, n_x)``."""
        x = np.asarray(x, float)
        J = np.zeros(x.shape[:-1] + (self.input_dim, self.n_x))
        J[..., np.arange(self.n_x), np.arange(self.n_x)] = 1.0
        return J

    def default_context(self, n=None):
        return None

    def control_bounds(self):
        """Box bounds on the control as ``(low, high)``; None means unbounded."""
        return None, None

    def describe(self):
        """Parameters that identify this environment (used in manifests)."""
        return {"name": self.name}


@dataclass
class Trajectory:
    """States ``x_0..x_T``, controls ``u_0..u_{T-1}`` and per-stage costs."""

    states: np.ndarray
    controls: np.ndarray
    costs: np.ndarray
    defect: float = 0.0
    context: np.ndarray | None = None

    def __post_init__(self):
        self.states = np.asarray(self.states, float)
        self.controls = np.asarray(self.controls, float)
        self.costs = np.asarray(self.costs, float)
        if self.states.shape[0] != self.controls.shape[0] + 1:
            raise ContractError(
                f"trajectory needs T+1 states for T controls, got "
                f"{self.states.shape[0]} states and {self.controls.shape[0]} controls"
            )

    @property
    def horizon(self):
        return self.controls.shape[0]

    @property
    def cumulative_cost(self):
        return float(np.sum(self.costs))


def _check_dim(a, n, what):
    a = np.asarray(a, dtype=float)
    if a.ndim == 0 or a.shape[-1] != n:
        raise ContractError(f"{what} must have last dimension {n}, got shape {a.shape}")
    return a


def step(model, x, u, ctx=None):
    """One application of the model dynamics, ``f(x, u)``."""
    x = _check_dim(x, model.n_x, "state")
    u = _check_dim(u, model.n_u, "control")
    return model.dynamics(x, u, ctx)


def rollout(model, x0, controls, ctx=None):
    """Chain ``step`` from ``x0`` through ``controls`` and record stage costs."""
    x = _check_dim(x0, model.n_x, "initial state")
    us = np.asarray(controls, dtype=float).reshape(-1, model.n_u) if len(controls) else np.zeros((0, model.n_u))
    xs = [x]
    costs = []
    for u in us:
        costs.append(float(model.stage_cost(x, u, ctx)))
        x = step(model, x, u, ctx)
        xs.append(x)
    return Trajectory(np.array(xs), us, np.array(costs), defect=0.0, context=ctx)


def dynamics_defect(model, states, controls, ctx=None):
    """``max_k ||x_{k+1} - f(x_k, u_k)||_inf`` of a state/control sequence."""
    states = np.asarray(states, float)
    if len(controls) == 0:
        return 0.0
    c = None if ctx is None else np.asarray(ctx)[..., None, :]
    nxt = model.dynamics(states[..., :-1, :], np.asarray(controls, float), c)
    return float(np.max(np.abs(nxt - states[..., 1:, :])))


@dataclass
class Linearization:
    """First-order model and Gauss-Newton cost data at a point (batched)."""

    A: np.ndarray
    B: np.ndarray
    cost_grad_x: np.ndarray
    cost_grad_u: np.ndarray
    cost_hess_xx: np.ndarray
    cost_hess_xu: np.ndarray
    cost_hess_uu: np.ndarray
    constraint: np.ndarray
    constraint_x: np.ndarray
    constraint_u: np.ndarray
    extra: dict = field(default_factory=dict)


def linearize(model, x, u, ctx=None, finite_difference=False):
    """Dynamics Jacobians, Gauss-Newton cost derivatives and constraint Jacobians.

    The stage cost is ``||r(x, u)||^2`` so its gradient is ``2 J^T r`` and its
    Gauss-Newton Hessian ``2 J^T J``.  With ``finite_difference=True`` the base
    class central-difference derivatives (step 1e-6) are used regardless of any
    analytic override.
    """
    x = _check_dim(x, model.n_x, "state")
    u = _check_dim(u, model.n_u, "control")
    if finite_difference:
        A, B = EnvModel.dynamics_jac(model, x, u, ctx)
        Rx, Ru = EnvModel.cost_residual_jac(model, x, u, ctx)
        Cx, Cu = EnvModel.constraint_jac(model, x, u, ctx)
    else:
        A, B = model.dynamics_jac(x, u, ctx)
        Rx, Ru = model.cost_residual_jac(x, u, ctx)
        Cx, Cu = model.constraint_jac(x, u, ctx)
    r = model.cost_residual(x, u, ctx)
    RxT = np.swapaxes(Rx, -1, -2)
    RuT = np.swapaxes(Ru, -1, -2)
    lin = Linearization(
        A=A,
        B=B,
        cost_grad_x=2.0 * np.einsum("...ij,...j->...i", RxT, r),
        cost_grad_u=2.0 * np.einsum("...ij,...j->...i", RuT, r),
        cost_hess_xx=2.0 * RxT @ Rx,
        cost_hess_xu=2.0 * RxT @ Ru,
        cost_hess_uu=2.0 * RuT @ Ru,
        constraint=model.constraint(x, u, ctx),
        constraint_x=Cx,
        constraint_u=Cu,
    )
    for name in ("A", "B", "cost_grad_x", "cost_grad_u", "cost_hess_xx", "constraint_x", "constraint_u"):
        if not np.all(np.isfinite(getattr(lin, name))):
            raise NumericalError(f"non-finite derivative '{name}' at x={x!r}, u={u!r}")
    return lin
