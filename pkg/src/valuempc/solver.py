"""Stagewise SQP for finite-horizon OCPs with hard inequality constraints.

The solver works on a batch of independent problems sharing one environment
and horizon (each with its own initial state and optional context).  Every
array carries the batch on axis 0 and the stage on axis 1.  Per-problem logic
(convergence, line search, penalty updates) is masked so that a problem's
iterates do not depend on which other problems share the batch.

QP subproblems are solved with a primal-dual interior-point method
(Mehrotra predictor-corrector) whose Newton systems are eliminated stage by
stage with a Riccati recursion, so the cost is linear in the horizon.
Multiple shooting is used: states are decision variables and the dynamics
enter as equality constraints.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import Trajectory, rollout
try:
    from . import _qpkernel as _kernel
except ImportError:  # numba missing: fall back to the numpy implementation
    _kernel = None
from .errors import ContractError

_EPS_GRAD_ZERO = 1e-14
_IP_STAGNATION = 3
_NULL_STEP = 1e-7
_MERIT_RTOL = 1e-13


@dataclass
class SolverConfig:
    """Tolerances and iteration caps of the SQP."""

    max_sqp_iterations: int = 20
    kkt_tolerance: float = 1e-4
    max_qp_iterations: int = 200
    qp_tolerance: float = 1e-9
    violation_tolerance: float = 1e-6
    dynamics_tolerance: float = 1e-8
    armijo: float = 1e-4
    backtrack_factor: float = 0.5
    max_backtracks: int = 10
    control_regularization: float = 1e-10

    def __post_init__(self):
        for name in ("kkt_tolerance", "qp_tolerance", "violation_tolerance", "dynamics_tolerance",
                     "backtrack_factor"):
            if not getattr(self, name) > 0:
                raise ContractError(f"{name} must be positive")
        if self.max_sqp_iterations < 0 or self.max_qp_iterations < 1:
            raise ContractError("iteration caps must be nonnegative / positive")

    @classmethod
    def offline(cls, **kw):
        return cls(**kw)

    @classmethod
    def online(cls, **kw):
        kw.setdefault("max_sqp_iterations", 6)
        kw.setdefault("violation_tolerance", 1e-3)
        return cls(**kw)

    def to_dict(self):
        return asdict(self)


@dataclass
class OcpProblem:
    """Problem (T-step lookahead): min sum l + V(x_T) s.t. dynamics, c >= 0, x_T in Omega."""

    env: object
    horizon: int
    x0: np.ndarray
    terminal: object | None = None
    context: np.ndarray | None = None

    def __post_init__(self):
        if int(self.horizon) < 1:
            raise ContractError("horizon must be >= 1")
        self.horizon = int(self.horizon)
        self.x0 = np.asarray(self.x0, float)
        if self.x0.shape != (self.env.n_x,):
            raise ContractError(f"x0 must have shape ({self.env.n_x},), got {self.x0.shape}")

    @property
    def terminal_set(self):
        return self.env.n_omega > 0


@dataclass
class SolveResult:
    trajectory: Trajectory
    optimal_cost: float
    kkt_residual: float
    iterations: int
    max_constraint_violation: float
    converged: bool
    infeasible_x0: bool = False
    qp_iterations: int = 0
    solve_time: float = 0.0

    def diagnostics(self):
        return {"iterations": self.iterations, "kkt_residual": self.kkt_residual,
                "max_constraint_violation": self.max_constraint_violation,
                "converged": self.converged, "infeasible_x0": self.infeasible_x0,
                "qp_iterations": self.qp_iterations, "optimal_cost": self.optimal_cost,
                "solve_time": self.solve_time}


@dataclass
class BatchSolution:
    """Solutions of a batch of OCPs (axis 0 indexes problems)."""

    states: np.ndarray
    controls: np.ndarray
    stage_costs: np.ndarray
    cost: np.ndarray
    kkt_residual: np.ndarray
    iterations: np.ndarray
    max_violation: np.ndarray
    defect: np.ndarray
    converged: np.ndarray
    infeasible_x0: np.ndarray
    qp_iterations: np.ndarray
    stalled: np.ndarray
    solve_time: float = 0.0
    merit_history: list = field(default_factory=list)

    def __len__(self):
        return self.states.shape[0]

    def result(self, i, context=None):
        traj = Trajectory(self.states[i], self.controls[i], self.stage_costs[i],
                          defect=float(self.defect[i]), context=context)
        return SolveResult(traj, float(self.cost[i]), float(self.kkt_residual[i]),
                           int(self.iterations[i]), float(self.max_violation[i]),
                           bool(self.converged[i]), bool(self.infeasible_x0[i]),
                           int(self.qp_iterations[i]), self.solve_time)


# ---------------------------------------------------------------------------
# QP subproblem
# ---------------------------------------------------------------------------

@dataclass
class StageQP:
    """Batched stagewise QP.

    minimize   sum_k 1/2 [dx;du]^T [Q S; S^T R] [dx;du] + q^T dx + r^T du
               + 1/2 dx_T^T Q_T dx_T + q_T^T dx_T
    subject to dx_0 = 0,  dx_{k+1} = A_k dx_k + B_k du_k + e_k,
               Gx_k dx_k + Gu_k du_k + g_k >= 0   (k < T),
               Gx_T dx_T + g_T >= 0.

    Shapes: Q (b, T+1, nx, nx), S (b, T, nx, nu), R (b, T, nu, nu),
    q (b, T+1, nx), r (b, T, nu), A (b, T, nx, nx), B (b, T, nx, nu),
    e (b, T, nx), Gx (b, T+1, m, nx), Gu (b, T, m, nu), g (b, T+1, m).
    """

    Q: np.ndarray
    S: np.ndarray
    R: np.ndarray
    q: np.ndarray
    r: np.ndarray
    A: np.ndarray
    B: np.ndarray
    e: np.ndarray
    Gx: np.ndarray
    Gu: np.ndarray
    g: np.ndarray

    @property
    def horizon(self):
        return self.R.shape[1]

    @property
    def n_rows(self):
        return self.g.shape[2]

    @classmethod
    def single(cls, **stages):
        """Build a batch-of-one QP from unbatched stage arrays."""
        return cls(**{k: np.asarray(v, float)[None] for k, v in stages.items()})


@dataclass
class QPSolution:
    dx: np.ndarray
    du: np.ndarray
    lam: np.ndarray
    costate: np.ndarray
    iterations: np.ndarray
    residual: np.ndarray
    converged: np.ndarray


def _mv(M, v):
    # einsum beats matmul on stacks of tiny matrices
    return np.einsum("...ij,...j->...i", M, v)


def _T(M):
    return np.swapaxes(M, -1, -2)


def _spd_inverse(M):
    """Inverse of a stack of symmetric positive definite matrices.

    Interior-point weights make some stacks badly conditioned; on a singular
    pivot the whole stack is retried with a diagonal shift relative to its scale.
    """
    try:
        return np.linalg.inv(M)
    except np.linalg.LinAlgError:
        n = M.shape[-1]
        scale = np.max(np.abs(M), axis=(-1, -2), keepdims=True)
        return np.linalg.inv(M + 1e-13 * (scale + 1.0) * np.eye(n))


def _riccati_factor(Qt, St, Rt, A, B):
    """Backward Riccati sweep on stage Hessians.

    Returns per-stage arrays (time-major, contiguous) used by ``_riccati_solve``:
    ``ABt = [A B]^T``, ``Quu_inv``, ``M = [I K^T]``, ``KA = [K; A + B K]`` and
    the value Hessians ``V_1..V_T``.
    """
    nb, T, nu = Rt.shape[:3]
    nx = Qt.shape[-1]
    ABt = np.ascontiguousarray(np.moveaxis(np.concatenate([A, B], axis=-1), 1, 0).swapaxes(-1, -2))
    Quu_inv = np.empty((T, nb, nu, nu))
    M = np.empty((T, nb, nx, nx + nu))
    M[..., :nx] = np.eye(nx)
    KA = np.empty((T, nb, nu + nx, nx))
    Vs = np.empty((T + 1, nb, nx, nx))
    Vn = Vs[T] = Qt[:, T]
    for k in range(T - 1, -1, -1):
        Ak, Bk = A[:, k], B[:, k]
        VA = Vn @ Ak
        BtV = _T(Bk) @ Vn
        qux = _T(St[:, k]) + BtV @ Ak
        quu = Rt[:, k] + BtV @ Bk
        quu = 0.5 * (quu + _T(quu))
        inv = _spd_inverse(quu)
        Kk = -inv @ qux
        Vk = Qt[:, k] + _T(Ak) @ VA + _T(qux) @ Kk
        Vn = Vs[k] = 0.5 * (Vk + _T(Vk))
        Quu_inv[k] = inv
        M[k, :, :, nx:] = _T(Kk)
        KA[k, :, :nu] = Kk
        KA[k, :, nu:] = Ak + Bk @ Kk
    return ABt, Quu_inv, M, KA, Vs


def _riccati_solve(fact, hx, hu, A, B, e=None):
    """Solve the equality-constrained QP with linear terms ``hx``, ``hu`` given a factorization.

    ``e`` holds dynamics offsets, ``dx_{k+1} = A dx_k + B du_k + e_k``.
    """
    ABt, Quu_inv, M, KA, Vs = fact
    nb, T, nu = hu.shape
    nx = hx.shape[2]
    h = np.concatenate([hx[:, :T], hu], axis=-1)
    v = hx[:, T]
    kff = np.empty((T, nb, nu))
    for k in range(T - 1, -1, -1):
        if e is not None:
            v = v + _mv(Vs[k + 1], e[:, k])
        w = h[:, k] + _mv(ABt[k], v)
        kff[k] = -_mv(Quu_inv[k], w[:, nx:])
        v = _mv(M[k], w)
    dx = np.zeros((nb, T + 1, nx))
    du = np.empty((nb, T, nu))
    for k in range(T):
        y = _mv(KA[k], dx[:, k])
        du[:, k] = y[:, :nu] + kff[k]
        dx[:, k + 1] = y[:, nu:] + _mv(B[:, k], kff[k])
        if e is not None:
            dx[:, k + 1] += e[:, k]
    return dx, du


def _stage_grad(qp, dx, du):
    """Gradient of the QP objective at (dx, du)."""
    gx = _mv(qp.Q, dx) + qp.q
    gx[:, :-1] += _mv(qp.S, du)
    gu = _mv(_T(qp.S), dx[:, :-1]) + _mv(qp.R, du) + qp.r
    return gx, gu


def _constraint_values(qp, dx, du):
    z = _mv(qp.Gx, dx) + qp.g
    z[:, :-1] += _mv(qp.Gu, du)
    return z


def _reduced_residual(A, B, gx, gu):
    """Costates that zero the state-stationarity and the resulting control residual.

    With ``gx, gu`` the gradients of the Lagrangian without dynamics terms,
    ``nu_T = gx_T``, ``nu_k = gx_k + A_k^T nu_{k+1}`` and the control residual is
    ``gu_k + B_k^T nu_{k+1}``.
    """
    T = gu.shape[1]
    nx = gx.shape[2]
    ABt = _T(np.concatenate([A, B], axis=-1))
    nu = np.empty_like(gx)
    res = np.empty_like(gu)
    nu[:, T] = gx[:, T]
    for k in range(T - 1, -1, -1):
        w = _mv(ABt[:, k], nu[:, k + 1])
        res[:, k] = gu[:, k] + w[:, nx:]
        nu[:, k] = gx[:, k] + w[:, :nx]
    return nu, res


def _ip_residual(res, rp, s, lam, grad_scale):
    """Scaled interior-point residual: stationarity, primal feasibility, complementarity."""
    nb = rp.shape[0]
    flat = lambda a: np.abs(a).reshape(nb, -1)
    lam_scale = 1.0 + np.max(flat(lam), axis=1)
    stat = np.max(flat(res), axis=1, initial=0.0) / np.maximum(grad_scale, lam_scale)
    return np.maximum(stat, np.maximum(np.max(flat(rp), axis=1), np.max(flat(s * lam), axis=1) / lam_scale))


def _step_to_boundary(v, dv):
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(dv < 0.0, -v / dv, np.inf)
    return np.min(ratio.reshape(ratio.shape[0], -1), axis=1, initial=np.inf)


def solve_qp_subproblem(qp, tol=1e-9, max_iter=200, backend=None):
    """Solve a batched stagewise QP.

    ``backend`` is "compiled" (numba kernel, the default when numba imports)
    or "numpy" (vectorized reference implementation); both run the same
    algorithm described in ``_solve_qp_numpy``.
    """
    backend = backend or ("compiled" if _kernel is not None else "numpy")
    if backend == "numpy" or _kernel is None:
        return _solve_qp_numpy(qp, tol, max_iter)
    arrs = [np.ascontiguousarray(getattr(qp, f), dtype=float) for f in StageQP.__dataclass_fields__]
    dx, du, lam, nu, iters, resid = _kernel.solve_batch_qp(*arrs, float(tol), int(max_iter))
    return QPSolution(dx, du, lam, nu, iters, resid, resid <= tol if qp.n_rows else np.ones(len(resid), bool))


def _solve_qp_numpy(qp, tol=1e-9, max_iter=200):
    """Solve a batched stagewise QP with vectorized numpy.

    Unconstrained QPs (no inequality rows) take one Riccati solve.  Otherwise a
    Mehrotra predictor-corrector interior-point loop is run; each iteration
    factorizes ``H + G^T diag(lam/s) G`` once with a Riccati sweep and performs
    two linear solves.  Problems stop individually once the control residual,
    the primal residual and the complementarity are all below ``tol``; a
    problem that hits ``max_iter`` returns its last iterate with the residual
    reported.
    """
    nb, T = qp.R.shape[:2]
    m = qp.n_rows
    A, B = qp.A, qp.B
    if m == 0:
        fact = _riccati_factor(qp.Q, qp.S, qp.R, A, B)
        dx, du = _riccati_solve(fact, qp.q, qp.r, A, B, qp.e)
        gx, gu = _stage_grad(qp, dx, du)
        nu, res = _reduced_residual(A, B, gx, gu)
        resid = np.max(np.abs(res).reshape(nb, -1), axis=1, initial=0.0)
        return QPSolution(dx, du, np.zeros((nb, T + 1, 0)), nu, np.ones(nb, int), resid,
                          np.ones(nb, bool))

    # dynamics-consistent starting point with zero control step
    dx = np.zeros((nb, T + 1, A.shape[2]))
    du = np.zeros((nb, T, B.shape[3]))
    for k in range(T):
        dx[:, k + 1] = _mv(A[:, k], dx[:, k]) + qp.e[:, k]

    z = _constraint_values(qp, dx, du)
    s = np.maximum(z, 1.0)
    lam = np.ones_like(s)
    GxT, GuT = _T(qp.Gx), _T(qp.Gu)
    iters = np.zeros(nb, int)
    resid = np.full(nb, np.inf)
    done = np.zeros(nb, bool)
    n_rows = (T + 1) * m
    grad_scale = 1.0 + np.maximum(np.max(np.abs(qp.q).reshape(nb, -1), axis=1, initial=0.0),
                                  np.max(np.abs(qp.r).reshape(nb, -1), axis=1, initial=0.0))

    best = {"dx": dx.copy(), "du": du.copy(), "lam": lam.copy(), "resid": np.full(nb, np.inf)}
    best_it = np.zeros(nb, int)
    finished = np.zeros(nb, bool)

    for it in range(max_iter + 1):
        z = _constraint_values(qp, dx, du)
        rp = z - s
        gx, gu = _stage_grad(qp, dx, du)
        gx = gx - _mv(GxT, lam)
        gu = gu - _mv(GuT, lam[:, :-1])
        _, res = _reduced_residual(A, B, gx, gu)
        resid = _ip_residual(res, rp, s, lam, grad_scale)
        better = (resid < best["resid"]) & ~finished
        for key, val in (("dx", dx), ("du", du), ("lam", lam)):
            best[key][better] = val[better]
        best["resid"][better] = resid[better]
        best_it[better] = it
        # stop on tolerance, or once rounding makes the residual stagnate
        finished |= (best["resid"] <= tol) | (it - best_it >= _IP_STAGNATION)
        if finished.all() or it == max_iter:
            break
        mu = np.sum((s * lam).reshape(nb, -1), axis=1) / n_rows

        W = lam / s
        Qt = qp.Q + GxT @ (W[..., None] * qp.Gx)
        St = qp.S + GxT[:, :-1] @ (W[:, :-1, :, None] * qp.Gu)
        Rt = qp.R + GuT @ (W[:, :-1, :, None] * qp.Gu)
        fact = _riccati_factor(Qt, St, Rt, A, B)
        gx0, gu0 = _stage_grad(qp, dx, du)

        def direction(rc):
            y = (rc + lam * rp) / s - lam
            hx = gx0 + _mv(GxT, y)
            hu = gu0 + _mv(GuT, y[:, :-1])
            ddx, ddu = _riccati_solve(fact, hx, hu, A, B)
            ds = _constraint_values(qp, ddx, ddu) - qp.g + rp
            dlam = -(rc + lam * ds) / s
            return ddx, ddu, ds, dlam

        # predictor
        rc = s * lam
        _, _, ds_a, dl_a = direction(rc)
        a_p = np.minimum(1.0, _step_to_boundary(s, ds_a))
        a_d = np.minimum(1.0, _step_to_boundary(lam, dl_a))
        mu_aff = np.sum(((s + a_p[:, None, None] * ds_a) * (lam + a_d[:, None, None] * dl_a)).reshape(nb, -1),
                        axis=1) / n_rows
        sigma = np.clip((mu_aff / np.maximum(mu, 1e-300)) ** 3, 0.0, 1.0)
        # corrector
        rc = s * lam + ds_a * dl_a - (sigma * mu)[:, None, None]
        ddx, ddu, ds, dlam = direction(rc)
        alpha = np.minimum(1.0, 0.995 * np.minimum(_step_to_boundary(s, ds), _step_to_boundary(lam, dlam)))
        alpha = np.where(finished | ~np.isfinite(alpha), 0.0, alpha)
        a3 = alpha[:, None, None]
        dx = dx + a3 * ddx
        du = du + a3 * ddu
        s = s + a3 * ds
        lam = lam + a3 * dlam
        iters += ~finished

    dx, du, lam = best["dx"], best["du"], best["lam"]
    resid = best["resid"]
    done = resid <= tol
    gx, gu = _stage_grad(qp, dx, du)
    gx = gx - _mv(GxT, lam)
    gu = gu - _mv(GuT, lam[:, :-1])
    nu, _ = _reduced_residual(A, B, gx, gu)
    return QPSolution(dx, du, lam, nu, iters, resid, done)


# ---------------------------------------------------------------------------
# SQP
# ---------------------------------------------------------------------------

class _Evaluator:
    """Vectorized evaluation of costs, constraints and derivatives along trajectories."""

    def __init__(self, env, terminal, ctx):
        self.env = env
        self.terminal = terminal
        self.ctx = ctx  # (b, context_dim) or None
        self.n_c = env.n_c
        self.n_omega = env.n_omega
        self.m = max(self.n_c, self.n_omega)

    def _sctx(self, idx):
        return None if self.ctx is None else self.ctx[idx][:, None, :]

    def _tctx(self, idx):
        return None if self.ctx is None else self.ctx[idx]

    def values(self, idx, xs, us):
        """Stage costs, total cost, defects and constraint rows of trajectories."""
        env = self.env
        sctx = self._sctx(idx)
        stage = env.stage_cost(xs[:, :-1], us, sctx)
        total = np.sum(stage, axis=1)
        if self.terminal is not None:
            total = total + self.terminal.value(xs[:, -1], self._tctx(idx))
        defect = env.dynamics(xs[:, :-1], us, sctx) - xs[:, 1:]
        rows = self._rows(idx, xs, us)
        return stage, total, defect, rows

    def _rows(self, idx, xs, us):
        nb, T1 = xs.shape[:2]
        rows = np.ones((nb, T1, self.m))
        if self.n_c:
            rows[:, :-1, :self.n_c] = self.env.constraint(xs[:, :-1], us, self._sctx(idx))
        if self.n_omega:
            rows[:, -1, :self.n_omega] = self.env.omega_constraint(xs[:, -1], self._tctx(idx))
        return rows

    def qp_data(self, idx, xs, us, row_mask):
        env = self.env
        nb, T1, nx = xs.shape
        T = T1 - 1
        nu = us.shape[2]
        sctx = self._sctx(idx)
        X, U = xs[:, :-1], us
        A, B = env.dynamics_jac(X, U, sctx)
        r = env.cost_residual(X, U, sctx)
        Rx, Ru = env.cost_residual_jac(X, U, sctx)
        Q = np.zeros((nb, T1, nx, nx))
        q = np.zeros((nb, T1, nx))
        Q[:, :-1] = 2.0 * _T(Rx) @ Rx
        q[:, :-1] = 2.0 * _mv(_T(Rx), r)
        S = 2.0 * _T(Rx) @ Ru
        R = 2.0 * _T(Ru) @ Ru
        rv = 2.0 * _mv(_T(Ru), r)
        if self.terminal is not None:
            gT, HT = self.terminal.value_derivatives(xs[:, -1], self._tctx(idx))
            Q[:, -1] = HT
            q[:, -1] = gT
        e = env.dynamics(X, U, sctx) - xs[:, 1:]
        m = self.m
        Gx = np.zeros((nb, T1, m, nx))
        Gu = np.zeros((nb, T, m, nu))
        g = np.ones((nb, T1, m))
        if self.n_c:
            Cx, Cu = env.constraint_jac(X, U, sctx)
            Gx[:, :-1, :self.n_c] = Cx
            Gu[:, :, :self.n_c] = Cu
            g[:, :-1, :self.n_c] = env.constraint(X, U, sctx)
        if self.n_omega:
            Gx[:, -1, :self.n_omega] = env.omega_jac(xs[:, -1], self._tctx(idx))
            g[:, -1, :self.n_omega] = env.omega_constraint(xs[:, -1], self._tctx(idx))
        # rows that are fixed by x0 (no control dependence at stage 0) are dropped
        Gx = Gx * row_mask[..., None]
        Gu = Gu * row_mask[:, :-1, :, None]
        g = np.where(row_mask, g, 1.0)
        qp = StageQP(Q=Q, S=S, R=R, q=q, r=rv, A=A, B=B, e=e, Gx=Gx, Gu=Gu, g=g)
        return qp

    def row_mask(self, idx, xs, us):
        nb, T1 = xs.shape[:2]
        mask = np.zeros((nb, T1, self.m), bool)
        mask[:, :-1, :self.n_c] = True
        mask[:, -1, :self.n_omega] = True
        if self.n_c:
            _, Cu = self.env.constraint_jac(xs[:, :1], us[:, :1], None if self.ctx is None else self._sctx(idx))
            controllable = np.any(Cu[:, 0] != 0.0, axis=-1)
            mask[:, 0, :self.n_c] = controllable
        return mask


def _kkt(ev, qp, lam, rows, mask, defect):
    """KKT residual of the NLP at the linearization point for multipliers ``lam``."""
    nb = rows.shape[0]
    gx = qp.q - _mv(_T(qp.Gx), lam)
    gu = qp.r - _mv(_T(qp.Gu), lam[:, :-1])
    _, res = _reduced_residual(qp.A, qp.B, gx, gu)
    stat = np.max(np.abs(res).reshape(nb, -1), axis=1, initial=0.0)
    viol = np.max((np.maximum(-rows, 0.0) * mask).reshape(nb, -1), axis=1, initial=0.0)
    comp = np.max((np.abs(lam * rows) * mask).reshape(nb, -1), axis=1, initial=0.0)
    dyn = np.max(np.abs(defect).reshape(nb, -1), axis=1, initial=0.0)
    return np.maximum(np.maximum(stat, comp), np.maximum(viol, dyn)), viol, dyn


def solve_batch(env, x0, horizon, terminal=None, contexts=None, config=None,
                warm_states=None, warm_controls=None):
    """Solve a batch of T-step lookahead problems.

    ``x0`` has shape (b, n_x); ``contexts`` (b, context_dim) or None;
    ``warm_states``/``warm_controls`` (b, T+1, n_x)/(b, T, n_u) initialize the
    iterates (cold start: zero controls rolled out from x0).
    """
    config = config or SolverConfig()
    t_start = time.perf_counter()
    x0 = np.atleast_2d(np.asarray(x0, float))
    nb = x0.shape[0]
    T = int(horizon)
    if T < 1:
        raise ContractError("horizon must be >= 1")
    if x0.shape[1] != env.n_x:
        raise ContractError(f"x0 must have {env.n_x} columns, got {x0.shape[1]}")
    ctx = None
    if env.context_dim:
        if contexts is None:
            contexts = env.default_context(nb)
        ctx = np.asarray(contexts, float).reshape(nb, env.context_dim)
    ev = _Evaluator(env, terminal, ctx)

    if warm_controls is None:
        us = np.zeros((nb, T, env.n_u))
    else:
        us = np.array(warm_controls, float).reshape(nb, T, env.n_u)
    if warm_states is None:
        xs = np.empty((nb, T + 1, env.n_x))
        xs[:, 0] = x0
        sc = None if ctx is None else ctx
        for k in range(T):
            xs[:, k + 1] = env.dynamics(xs[:, k], us[:, k], sc)
    else:
        xs = np.array(warm_states, float).reshape(nb, T + 1, env.n_x)
    xs[:, 0] = x0

    all_idx = np.arange(nb)
    mask = ev.row_mask(all_idx, xs, us)
    stage, total, defect, rows = ev.values(all_idx, xs, us)
    infeasible_x0 = np.zeros(nb, bool)
    if ev.n_c:
        fixed = ~mask[:, 0, :ev.n_c]
        infeasible_x0 = np.any(fixed & (rows[:, 0, :ev.n_c] < -config.violation_tolerance), axis=1)

    lam = np.zeros((nb, T + 1, ev.m))
    penalty = np.zeros(nb)
    kkt = np.full(nb, np.inf)
    viol = np.zeros(nb)
    dyn = np.zeros(nb)
    iterations = np.zeros(nb, int)
    qp_iters = np.zeros(nb, int)
    converged = np.zeros(nb, bool)
    stalled = np.zeros(nb, bool)
    active = np.ones(nb, bool)
    merit_history = []

    for it in range(config.max_sqp_iterations + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        qp = ev.qp_data(idx, xs[idx], us[idx], mask[idx])
        k_i, v_i, d_i = _kkt(ev, qp, lam[idx], rows[idx], mask[idx], defect[idx])
        kkt[idx], viol[idx], dyn[idx] = k_i, v_i, d_i
        conv = ((k_i <= config.kkt_tolerance) & (v_i <= config.violation_tolerance)
                & (d_i <= config.dynamics_tolerance))
        converged[idx] = conv
        active[idx[conv]] = False
        if it == config.max_sqp_iterations:
            break
        keep = ~conv
        idx = idx[keep]
        if idx.size == 0:
            break
        qp = StageQP(*(getattr(qp, f)[keep] for f in StageQP.__dataclass_fields__))
        sol = solve_qp_subproblem(qp, config.qp_tolerance, config.max_qp_iterations)
        qp_iters[idx] += sol.iterations

        # l1 merit: cost + penalty * (||defects||_1 + ||constraint violation||_1)
        mk = mask[idx]
        infeas0 = _infeasibility(defect[idx], rows[idx], mk)
        mult = np.maximum(np.max(np.abs(sol.lam).reshape(idx.size, -1), axis=1, initial=0.0),
                          np.max(np.abs(sol.costate).reshape(idx.size, -1), axis=1, initial=0.0))
        penalty[idx] = np.maximum(penalty[idx], 1.1 * mult + 1e-6)
        pen = penalty[idx]
        dirderiv = (np.sum(qp.q * sol.dx, axis=(1, 2)) + np.sum(qp.r * sol.du, axis=(1, 2))
                    - pen * infeas0)
        phi0 = total[idx] + pen * infeas0

        alpha = np.ones(idx.size)
        pending = np.ones(idx.size, bool)
        accepted = np.zeros(idx.size, bool)
        new_x = xs[idx].copy()
        new_u = us[idx].copy()
        new_vals = [stage[idx].copy(), total[idx].copy(), defect[idx].copy(), rows[idx].copy()]
        new_phi = phi0.copy()
        for bt in range(config.max_backtracks + 1):
            p = np.flatnonzero(pending)
            if p.size == 0:
                break
            a = alpha[p]
            tx = xs[idx[p]] + a[:, None, None] * sol.dx[p]
            tu = us[idx[p]] + a[:, None, None] * sol.du[p]
            tx[:, 0] = x0[idx[p]]
            st, tot, dfc, rw = ev.values(idx[p], tx, tu)
            phi = tot + pen[p] * _infeasibility(dfc, rw, mk[p])
            dd = dirderiv[p]
            # slack for rounding in the merit value once decrease drops below machine precision
            slack = _MERIT_RTOL * np.maximum(1.0, np.abs(phi0[p]))
            ok = np.where(dd < -_EPS_GRAD_ZERO,
                          phi <= phi0[p] + config.armijo * a * dd + slack,
                          phi <= phi0[p] + slack)
            ok &= np.isfinite(phi)
            acc = p[ok]
            new_x[acc], new_u[acc] = tx[ok], tu[ok]
            for arr, val in zip(new_vals, (st, tot, dfc, rw)):
                arr[acc] = val[ok]
            new_phi[acc] = phi[ok]
            accepted[acc] = True
            pending[acc] = False
            alpha[p[~ok]] *= config.backtrack_factor
        a_acc = np.where(accepted, alpha, 0.0)
        xs[idx], us[idx] = new_x, new_u
        stage[idx], total[idx], defect[idx], rows[idx] = new_vals
        lam[idx] = lam[idx] + a_acc[:, None, None] * (sol.lam - lam[idx])
        iterations[idx] += accepted
        # merit before and after this iteration (same penalty), NaN for finished problems
        before = np.full(nb, np.nan)
        after = np.full(nb, np.nan)
        before[idx], after[idx] = phi0, new_phi
        merit_history.append((before, after))
        # a negligible primal step means only the multipliers are off: take the full
        # dual step, whatever the (rounding dominated) line search decided
        step_size = np.maximum(np.max(np.abs(sol.dx).reshape(idx.size, -1), axis=1, initial=0.0),
                               np.max(np.abs(sol.du).reshape(idx.size, -1), axis=1, initial=0.0))
        null = step_size <= _NULL_STEP
        lam[idx[null]] = sol.lam[null]
        failed = idx[~accepted & ~null]
        stalled[failed] = True
        active[failed] = False

    # stalled problems still get their final KKT residual evaluated
    idx = np.flatnonzero(stalled)
    if idx.size:
        qp = ev.qp_data(idx, xs[idx], us[idx], mask[idx])
        kkt[idx], viol[idx], dyn[idx] = _kkt(ev, qp, lam[idx], rows[idx], mask[idx], defect[idx])
        converged[idx] = ((kkt[idx] <= config.kkt_tolerance) & (viol[idx] <= config.violation_tolerance)
                          & (dyn[idx] <= config.dynamics_tolerance))
    converged &= ~infeasible_x0

    full_viol = np.max((np.maximum(-rows, 0.0) * mask).reshape(nb, -1), axis=1, initial=0.0)
    return BatchSolution(states=xs, controls=us, stage_costs=stage, cost=total, kkt_residual=kkt,
                         iterations=iterations, max_violation=full_viol,
                         defect=np.max(np.abs(defect).reshape(nb, -1), axis=1, initial=0.0),
                         converged=converged, infeasible_x0=infeasible_x0, qp_iterations=qp_iters,
                         stalled=stalled, solve_time=time.perf_counter() - t_start,
                         merit_history=merit_history)


def _infeasibility(defect, rows, mask):
    nb = defect.shape[0]
    return (np.sum(np.abs(defect).reshape(nb, -1), axis=1)
            + np.sum((np.maximum(-rows, 0.0) * mask).reshape(nb, -1), axis=1))


def solve_ocp(problem, config=None, warm_start=None):
    """Solve one OCP; ``warm_start`` is a Trajectory of matching horizon."""
    ws = wu = None
    if warm_start is not None:
        if warm_start.horizon != problem.horizon:
            raise ContractError("warm start horizon does not match the problem")
        ws, wu = warm_start.states[None], warm_start.controls[None]
    ctx = None if problem.context is None else np.asarray(problem.context, float)[None]
    sol = solve_batch(problem.env, problem.x0[None], problem.horizon, problem.terminal, ctx, config, ws, wu)
    return sol.result(0, context=problem.context)


def shift_warm_start(states, controls, x_next):
    """Shift a solution by one stage, repeating the last state/control."""
    xs = np.concatenate([states[..., 1:, :], states[..., -1:, :]], axis=-2)
    us = np.concatenate([controls[..., 1:, :], controls[..., -1:, :]], axis=-2)
    xs[..., 0, :] = x_next
    return xs, us


__all__ = ["SolverConfig", "OcpProblem", "SolveResult", "BatchSolution", "StageQP", "QPSolution",
           "solve_qp_subproblem", "solve_batch", "solve_ocp", "shift_warm_start", "rollout"]
