"""Concrete environments: scalar LQR oracle, torque-limited pendulum, point with obstacle."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .core import EnvModel
from .errors import ConfigError

MAX_REJECTIONS = 10_000


def wrap_angle(theta):
    """Wrap angles to ``[-pi, pi)``."""
    return np.mod(np.asarray(theta, float) + np.pi, 2.0 * np.pi) - np.pi


@dataclass(frozen=True)
class ScalarLQR(EnvModel):
    """``x' = x + u`` with ``l = x^2 + u^2``; optional control bounds."""

    u_min: float = -math.inf
    u_max: float = math.inf
    state_low: float = -1.0
    state_high: float = 1.0

    name = "lqr1d"
    n_x = 1
    n_u = 1
    n_omega = 0
    dt = 1.0

    @property
    def n_c(self):
        return int(math.isfinite(self.u_min)) + int(math.isfinite(self.u_max))

    def dynamics(self, x, u, ctx=None):
        return np.asarray(x, float) + np.asarray(u, float)

    def dynamics_jac(self, x, u, ctx=None):
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1])
        return np.ones(shape + (1, 1)), np.ones(shape + (1, 1))

    def cost_residual(self, x, u, ctx=None):
        x, u = np.broadcast_arrays(np.asarray(x, float), np.asarray(u, float))
        return np.concatenate([x, u], axis=-1)

    def cost_residual_jac(self, x, u, ctx=None):
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1])
        Rx = np.zeros(shape + (2, 1))
        Ru = np.zeros(shape + (2, 1))
        Rx[..., 0, 0] = 1.0
        Ru[..., 1, 0] = 1.0
        return Rx, Ru

    def constraint(self, x, u, ctx=None):
        u = np.asarray(u, float)
        shape = np.broadcast_shapes(np.shape(x)[:-1], u.shape[:-1])
        rows = []
        if math.isfinite(self.u_min):
            rows.append(u[..., 0] - self.u_min)
        if math.isfinite(self.u_max):
            rows.append(self.u_max - u[..., 0])
        if not rows:
            return np.zeros(shape + (0,))
        return np.broadcast_to(np.stack(rows, axis=-1), shape + (len(rows),)).copy()

    def constraint_jac(self, x, u, ctx=None):
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1])
        signs = []
        if math.isfinite(self.u_min):
            signs.append(1.0)
        if math.isfinite(self.u_max):
            signs.append(-1.0)
        Cx = np.zeros(shape + (len(signs), 1))
        Cu = np.zeros(shape + (len(signs), 1))
        Cu[..., :, 0] = signs
        return Cx, Cu

    def stationary_sample(self, rng, ctx=None):
        return np.zeros(1), np.zeros(1)

    def control_bounds(self):
        lo = self.u_min if math.isfinite(self.u_min) else None
        hi = self.u_max if math.isfinite(self.u_max) else None
        return lo, hi

    def sample_state(self, rng, n=None):
        size = 1 if n is None else n
        x = rng.uniform(self.state_low, self.state_high, size=(size, 1))
        return (x[0] if n is None else x), None

    def describe(self):
        return {"name": self.name, **asdict(self)}


@dataclass(frozen=True)
class Pendulum(EnvModel):
    """Torque-limited simple pendulum, explicit Euler on ``th'' = -(g/L) sin th + u``.

    State ``(theta, theta_dot)`` with ``theta = 0`` hanging down; the goal is the
    upright position ``theta = +-pi``.  The stage cost
    ``cos th + 1 + 0.01 th_dot^2 + 0.001 u^2`` is written as the squared norm of
    ``(sqrt2 cos(th/2), 0.1 th_dot, sqrt(0.001) u)`` for Gauss-Newton.
    """

    g_over_l: float = 9.81
    dt: float = 0.05
    u_max: float = 2.0
    theta_dot_max: float = 6.0
    velocity_weight: float = 0.01
    control_weight: float = 0.001

    name = "pendulum"
    n_x = 2
    n_u = 1
    n_c = 2
    n_omega = 0

    def dynamics(self, x, u, ctx=None):
        x = np.asarray(x, float)
        u = np.asarray(u, float)
        th, thd = x[..., 0], x[..., 1]
        acc = -self.g_over_l * np.sin(th) + u[..., 0]
        return np.stack([th + self.dt * thd, thd + self.dt * acc], axis=-1)

    def dynamics_jac(self, x, u, ctx=None):
        x = np.asarray(x, float)
        shape = np.broadcast_shapes(x.shape[:-1], np.shape(u)[:-1])
        A = np.zeros(shape + (2, 2))
        A[..., 0, 0] = 1.0
        A[..., 0, 1] = self.dt
        A[..., 1, 0] = -self.dt * self.g_over_l * np.cos(x[..., 0])
        A[..., 1, 1] = 1.0
        B = np.zeros(shape + (2, 1))
        B[..., 1, 0] = self.dt
        return A, B

    def stage_cost(self, x, u, ctx=None):
        x = np.asarray(x, float)
        u = np.asarray(u, float)
        return (np.cos(x[..., 0]) + 1.0 + self.velocity_weight * x[..., 1] ** 2
                + self.control_weight * u[..., 0] ** 2)

    def cost_residual(self, x, u, ctx=None):
        x = np.asarray(x, float)
        u = np.asarray(u, float)
        shape = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        r = np.empty(shape + (3,))
        r[..., 0] = math.sqrt(2.0) * np.cos(0.5 * x[..., 0])
        r[..., 1] = math.sqrt(self.velocity_weight) * x[..., 1]
        r[..., 2] = math.sqrt(self.control_weight) * u[..., 0]
        return r

    def cost_residual_jac(self, x, u, ctx=None):
        x = np.asarray(x, float)
        shape = np.broadcast_shapes(x.shape[:-1], np.shape(u)[:-1])
        Rx = np.zeros(shape + (3, 2))
        Ru = np.zeros(shape + (3, 1))
        Rx[..., 0, 0] = -math.sqrt(2.0) * 0.5 * np.sin(0.5 * x[..., 0])
        Rx[..., 1, 1] = math.sqrt(self.velocity_weight)
        Ru[..., 2, 0] = math.sqrt(self.control_weight)
        return Rx, Ru

    def constraint(self, x, u, ctx=None):
        u = np.asarray(u, float)
        shape = np.broadcast_shapes(np.shape(x)[:-1], u.shape[:-1])
        c = np.empty(shape + (2,))
        c[..., 0] = u[..., 0] + self.u_max
        c[..., 1] = self.u_max - u[..., 0]
        return c

    def constraint_jac(self, x, u, ctx=None):
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1])
        Cu = np.zeros(shape + (2, 1))
        Cu[..., 0, 0] = 1.0
        Cu[..., 1, 0] = -1.0
        return np.zeros(shape + (2, 2)), Cu

    def control_bounds(self):
        return -self.u_max, self.u_max

    def stationary_sample(self, rng, ctx=None):
        sign = 1.0 if rng.random() < 0.5 else -1.0
        return np.array([sign * math.pi, 0.0]), np.zeros(1)

    def sample_state(self, rng, n=None):
        size = 1 if n is None else n
        th = rng.uniform(-math.pi, math.pi, size=size)
        thd = rng.uniform(-self.theta_dot_max, self.theta_dot_max, size=size)
        x = np.stack([th, thd], axis=-1)
        return (x[0] if n is None else x), None

    # network sees (wrap(theta)/pi, theta_dot/theta_dot_max)
    def net_input(self, x, ctx=None):
        x = np.asarray(x, float)
        return np.stack([wrap_angle(x[..., 0]) / math.pi, x[..., 1] / self.theta_dot_max], axis=-1)

    def net_input_jac(self, x, ctx=None):
        x = np.asarray(x, float)
        J = np.zeros(x.shape[:-1] + (2, 2))
        J[..., 0, 0] = 1.0 / math.pi
        J[..., 1, 1] = 1.0 / self.theta_dot_max
        return J

    def describe(self):
        return {"name": self.name, **asdict(self)}


@dataclass(frozen=True)
class RoundedRect:
    """Axis-aligned rectangle Minkowski-summed with a disc of radius ``radius``."""

    center: tuple = (0.0, 0.0)
    half_extents: tuple = (0.3, 0.15)
    radius: float = 0.05

    def signed_distance(self, x, center=None):
        """Exact signed distance (negative inside) of points ``x`` (..., 2)."""
        d, _ = self.distance_and_gradient(x, center)
        return d

    def distance_and_gradient(self, x, center=None):
        x = np.asarray(x, float)
        c = np.asarray(self.center if center is None else center, float)
        p = x - c
        h = np.asarray(self.half_extents, float)
        q = np.abs(p) - h
        qpos = np.maximum(q, 0.0)
        outside = np.sqrt(np.sum(qpos * qpos, axis=-1))
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        dist = outside + inside - self.radius

        sgn = np.where(p >= 0.0, 1.0, -1.0)
        safe = np.where(outside > 0.0, outside, 1.0)[..., None]
        grad_out = sgn * qpos / safe
        axis = np.argmax(q, axis=-1)
        grad_in = np.zeros_like(p)
        np.put_along_axis(grad_in, axis[..., None], np.take_along_axis(sgn, axis[..., None], -1), -1)
        grad = np.where((outside > 0.0)[..., None], grad_out, grad_in)
        return dist, grad


@dataclass(frozen=True)
class PointEnv(EnvModel):
    """Single integrator ``x' = x + dt u`` in the plane with an optional obstacle.

    Stage cost ``||x - x*||^2 + 0.1 ||u||^2``.  The obstacle enters as
    ``c(x) = signed_distance(x) >= 0`` both as stage constraint and as the
    description of the feasible set (fully actuated system).
    """

    dt: float = 0.02
    target: tuple = (0.6, 0.0)
    obstacle: RoundedRect | None = field(default_factory=RoundedRect)
    control_weight: float = 0.1
    box_low: tuple = (-1.0, -1.0)
    box_high: tuple = (1.0, 1.0)
    name: str = "point"

    n_x = 2
    n_u = 2
    context_dim = 0

    @property
    def n_c(self):
        return 0 if self.obstacle is None else 1

    @property
    def n_omega(self):
        return self.n_c

    # conditioned subclass reads target/obstacle center from the context
    def _target(self, ctx):
        return np.asarray(self.target, float)

    def _obstacle_center(self, ctx):
        return None

    def dynamics(self, x, u, ctx=None):
        return np.asarray(x, float) + self.dt * np.asarray(u, float)

    def dynamics_jac(self, x, u, ctx=None):
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1])
        return (np.broadcast_to(np.eye(2), shape + (2, 2)).copy(),
                np.broadcast_to(self.dt * np.eye(2), shape + (2, 2)).copy())

    def cost_residual(self, x, u, ctx=None):
        e = np.asarray(x, float) - self._target(ctx)
        e, u = np.broadcast_arrays(e, math.sqrt(self.control_weight) * np.asarray(u, float))
        return np.concatenate([e, u], axis=-1)

    def cost_residual_jac(self, x, u, ctx=None):
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1])
        Rx = np.zeros(shape + (4, 2))
        Ru = np.zeros(shape + (4, 2))
        Rx[..., [0, 1], [0, 1]] = 1.0
        Ru[..., [2, 3], [0, 1]] = math.sqrt(self.control_weight)
        return Rx, Ru

    def constraint(self, x, u, ctx=None):
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1])
        if self.obstacle is None:
            return np.zeros(shape + (0,))
        d = self.obstacle.signed_distance(x, self._obstacle_center(ctx))
        return np.broadcast_to(d, shape)[..., None].copy()

    def constraint_jac(self, x, u, ctx=None):
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1])
        if self.obstacle is None:
            return np.zeros(shape + (0, 2)), np.zeros(shape + (0, 2))
        _, g = self.obstacle.distance_and_gradient(x, self._obstacle_center(ctx))
        return np.broadcast_to(g, shape + (2,))[..., None, :].copy(), np.zeros(shape + (1, 2))

    def omega_constraint(self, x, ctx=None):
        if self.obstacle is None:
            return np.zeros(np.shape(x)[:-1] + (0,))
        return self.obstacle.signed_distance(x, self._obstacle_center(ctx))[..., None]

    def omega_jac(self, x, ctx=None):
        if self.obstacle is None:
            return np.zeros(np.shape(x)[:-1] + (0, 2))
        _, g = self.obstacle.distance_and_gradient(x, self._obstacle_center(ctx))
        return g[..., None, :]

    def signed_distance(self, x, ctx=None):
        if self.obstacle is None:
            return np.full(np.shape(x)[:-1], np.inf)
        return self.obstacle.signed_distance(x, self._obstacle_center(ctx))

    def stationary_sample(self, rng, ctx=None):
        return self._target(ctx).copy(), np.zeros(2)

    def _uniform_free(self, rng, n, center=None):
        """Uniform box samples with obstacle rejection, bounded number of rejections."""
        low, high = np.asarray(self.box_low, float), np.asarray(self.box_high, float)
        out = np.empty((n, 2))
        todo = np.arange(n)
        centers = None if center is None else np.broadcast_to(np.asarray(center, float), (n, 2))
        rounds = 0
        # each open slot redraws until it is collision free (slot order keeps
        # the pairing with per-slot obstacle centers)
        while todo.size:
            cand = rng.uniform(low, high, size=(todo.size, 2))
            if self.obstacle is None:
                ok = np.ones(todo.size, bool)
            else:
                cc = None if centers is None else centers[todo]
                ok = self.obstacle.signed_distance(cand, cc) > 0.0
            out[todo[ok]] = cand[ok]
            todo = todo[~ok]
            rounds += 1
            if todo.size and rounds > MAX_REJECTIONS:
                raise ConfigError("state sampler exceeded 10^4 rejections; obstacle covers the box",
                                  key="obstacle")
        return out

    def sample_state(self, rng, n=None):
        size = 1 if n is None else n
        x = self._uniform_free(rng, size)
        return (x[0] if n is None else x), None

    def describe(self):
        d = {"name": self.name, "dt": self.dt, "target": list(self.target),
             "control_weight": self.control_weight,
             "box_low": list(self.box_low), "box_high": list(self.box_high)}
        if self.obstacle is None:
            d["obstacle"] = None
        else:
            d["obstacle"] = {"center": list(self.obstacle.center),
                             "half_extents": list(self.obstacle.half_extents),
                             "radius": self.obstacle.radius}
        return d


@dataclass(frozen=True)
class ConditionedPointEnv(PointEnv):
    """Point env whose target and obstacle center come from a per-episode context.

    Context layout: ``(target_x, target_y, obstacle_x, obstacle_y)``; it is
    appended to the network input.
    """

    obstacle_center_low: tuple = (-0.15, -0.15)
    obstacle_center_high: tuple = (0.15, 0.15)
    target_low: tuple = (-0.8, -0.8)
    target_high: tuple = (0.8, 0.8)
    name: str = "point_cond"

    context_dim = 4

    def _target(self, ctx):
        if ctx is None:
            return np.asarray(self.target, float)
        return np.asarray(ctx, float)[..., 0:2]

    def _obstacle_center(self, ctx):
        if ctx is None:
            return None
        return np.asarray(ctx, float)[..., 2:4]

    def default_context(self, n=None):
        c = np.array([*self.target, *self.obstacle.center], float)
        return c if n is None else np.tile(c, (n, 1))

    def sample_context(self, rng, n, center_low=None, center_high=None):
        """Draw ``n`` contexts: obstacle centers in a box, targets outside the obstacle."""
        lo = np.asarray(self.obstacle_center_low if center_low is None else center_low, float)
        hi = np.asarray(self.obstacle_center_high if center_high is None else center_high, float)
        centers = rng.uniform(lo, hi, size=(n, 2))
        targets = np.empty((n, 2))
        for i in range(n):
            for attempt in range(MAX_REJECTIONS + 1):
                t = rng.uniform(self.target_low, self.target_high)
                if self.obstacle.signed_distance(t, centers[i]) > 0.0:
                    targets[i] = t
                    break
            else:
                raise ConfigError("target sampler exceeded 10^4 rejections", key="target")
        return np.concatenate([targets, centers], axis=-1)

    def sample_state(self, rng, n=None, center_low=None, center_high=None):
        size = 1 if n is None else n
        ctx = self.sample_context(rng, size, center_low, center_high)
        x = self._uniform_free(rng, size, ctx[:, 2:4])
        if n is None:
            return x[0], ctx[0]
        return x, ctx

    def sample_ood_state(self, rng, n, margin=0.3):
        """Like ``sample_state`` but with obstacle centers drawn outside the training box.

        Centers are uniform on the frame between the training box and the box
        grown by ``margin`` on every side.
        """
        lo = np.asarray(self.obstacle_center_low, float)
        hi = np.asarray(self.obstacle_center_high, float)
        centers = np.empty((0, 2))
        while len(centers) < n:
            c = rng.uniform(lo - margin, hi + margin, size=(2 * n, 2))
            inside = np.all((c >= lo) & (c <= hi), axis=1)
            centers = np.concatenate([centers, c[~inside]])
        ctx = np.empty((n, 4))
        for i in range(n):
            ctx[i] = self.sample_context(rng, 1, centers[i], centers[i])[0]
        return self._uniform_free(rng, n, ctx[:, 2:4]), ctx

    def describe(self):
        d = super().describe()
        d.update(obstacle_center_low=list(self.obstacle_center_low),
                 obstacle_center_high=list(self.obstacle_center_high),
                 target_low=list(self.target_low), target_high=list(self.target_high))
        return d


ENV_NAMES = ("lqr1d", "pendulum", "point", "point_free", "point_cond")


def make_env(name, params=None):
    """Build an environment by name, applying overrides from a config mapping."""
    params = dict(params or {})
    if name == "lqr1d":
        base = ScalarLQR()
    elif name == "pendulum":
        base = Pendulum()
    elif name == "point":
        base = PointEnv()
    elif name == "point_free":
        base = PointEnv(obstacle=None, name="point_free")
    elif name == "point_cond":
        base = ConditionedPointEnv()
    else:
        raise ConfigError(f"unknown environment '{name}' (choose from {', '.join(ENV_NAMES)})", key="env")
    if not params:
        return base
    obstacle = params.pop("obstacle", "keep")
    valid = set(base.__dataclass_fields__) - {"obstacle", "name"}
    for key in params:
        if key not in valid:
            raise ConfigError(f"unknown parameter '{key}' for environment '{name}'", key=f"env.{key}")
    conv = {k: tuple(v) if isinstance(v, list) else v for k, v in params.items()}
    if obstacle != "keep":
        if not isinstance(base, PointEnv):
            raise ConfigError(f"environment '{name}' has no obstacle", key="env.obstacle")
        if obstacle is None:
            conv["obstacle"] = None
        else:
            allowed = {"center", "half_extents", "radius"}
            bad = set(obstacle) - allowed
            if bad:
                raise ConfigError(f"unknown obstacle key '{sorted(bad)[0]}'", key=f"env.obstacle.{sorted(bad)[0]}")
            o = {k: tuple(v) if isinstance(v, list) else v for k, v in obstacle.items()}
            conv["obstacle"] = replace(base.obstacle or RoundedRect(), **o)
    return replace(base, **conv)
