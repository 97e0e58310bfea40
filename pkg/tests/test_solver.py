import numpy as np
import pytest

from valuempc import make_env, OcpProblem, SolverConfig, solve_ocp, solve_batch
from valuempc.core import rollout, dynamics_defect
from valuempc.errors import ContractError
from valuempc.solver import StageQP, solve_qp_subproblem, shift_warm_start
from valuempc.valuenet import QuadraticValue, ShiftedValue, ValueNetwork, TerminalValue


def _lqr(**kw):
    return make_env("lqr1d", kw or None)


def test_lqr_no_terminal():
    res = solve_ocp(OcpProblem(_lqr(), 1, [1.0]))
    assert res.converged
    assert res.trajectory.controls[0, 0] == pytest.approx(0.0, abs=1e-8)
    assert res.optimal_cost == pytest.approx(1.0, abs=1e-8)


def test_lqr_quadratic_terminal():
    res = solve_ocp(OcpProblem(_lqr(), 1, [1.0], QuadraticValue([[1.0]])))
    assert res.converged
    assert res.trajectory.controls[0, 0] == pytest.approx(-0.5, abs=1e-7)
    assert res.optimal_cost == pytest.approx(1.5, abs=1e-8)


def test_lqr_active_bound():
    res = solve_ocp(OcpProblem(_lqr(u_min=0.0), 1, [1.0], QuadraticValue([[1.0]])))
    assert res.converged
    assert res.trajectory.controls[0, 0] == pytest.approx(0.0, abs=1e-6)
    assert res.optimal_cost == pytest.approx(2.0, abs=1e-6)
    assert res.max_constraint_violation <= 1e-6


def test_point_matches_grid_example():
    env = make_env("point")
    x0 = np.array([-0.5, 0.0])
    res = solve_ocp(OcpProblem(env, 2, x0), SolverConfig(kkt_tolerance=1e-6))
    # no terminal cost: the last control is free of charge only at zero; grid over u0 per axis
    u = np.arange(-5, 5.0001, 0.01)
    best = 0.0
    for i in range(2):
        e = x0[i] - env.target[i]
        best += np.min(e ** 2 + 0.1 * u ** 2 + (e + env.dt * u) ** 2)
    assert res.converged
    assert abs(res.optimal_cost - best) <= 0.01 * best


def test_cost_nonnegative_and_defect_small():
    env = make_env("pendulum")
    rng = np.random.default_rng(0)
    x, _ = env.sample_state(rng, 20)
    sol = solve_batch(env, x, 10, QuadraticValue(np.eye(2)))
    assert np.all(sol.cost >= 0.0)
    assert np.all(sol.defect[sol.converged] < 1e-8)
    for i in np.flatnonzero(sol.converged):
        assert dynamics_defect(env, sol.states[i], sol.controls[i]) < 1e-8
        assert sol.kkt_residual[i] <= 1e-4


def test_merit_monotone():
    env = make_env("point")
    rng = np.random.default_rng(1)
    x, _ = env.sample_state(rng, 30)
    sol = solve_batch(env, x, 10, QuadraticValue(np.eye(2)))
    assert sol.merit_history
    for before, after in sol.merit_history:
        ok = np.isfinite(before)
        assert np.all(after[ok] <= before[ok] + 1e-12 * np.maximum(1.0, np.abs(before[ok])))


def test_shift_invariance_pendulum():
    env = make_env("pendulum")
    net = ValueNetwork.build(2, (16, 16), 8, np.random.default_rng(0))
    tv = TerminalValue(net, env)
    x, _ = env.sample_state(np.random.default_rng(2), 10)
    cfg = SolverConfig(kkt_tolerance=1e-8, max_sqp_iterations=100)
    a = solve_batch(env, x, 10, tv, config=cfg)
    b = solve_batch(env, x, 10, ShiftedValue(tv, 10.0), config=cfg)
    ok = a.converged & b.converged
    assert ok.sum() >= 8
    assert np.max(np.abs(a.controls[ok] - b.controls[ok])) < 1e-6
    assert np.allclose(b.cost[ok] - a.cost[ok], 10.0, atol=1e-6)


def test_batch_independent_of_neighbours():
    env = make_env("point")
    x, _ = env.sample_state(np.random.default_rng(3), 12)
    tv = QuadraticValue(np.eye(2))
    full = solve_batch(env, x, 8, tv)
    part = solve_batch(env, x[5:7], 8, tv)
    assert np.array_equal(full.controls[5:7], part.controls)
    assert np.array_equal(full.iterations[5:7], part.iterations)


def test_obstacle_constraint_respected():
    env = make_env("point")
    x0 = np.array([-0.7, 0.02])
    res = solve_ocp(OcpProblem(env, 30, x0), SolverConfig())
    assert res.converged
    assert np.min(env.signed_distance(res.trajectory.states)) >= -1e-6


def test_infeasible_start_reported():
    env = make_env("point")
    res = solve_ocp(OcpProblem(env, 5, np.zeros(2)))
    assert res.infeasible_x0 and not res.converged


def test_horizon_validation():
    with pytest.raises(ContractError):
        OcpProblem(make_env("point"), 0, np.zeros(2))
    with pytest.raises(ContractError):
        OcpProblem(make_env("point"), 3, np.zeros(3))
    with pytest.raises(ContractError):
        SolverConfig(kkt_tolerance=0.0)


def test_online_config_defaults():
    c = SolverConfig.online()
    assert c.max_sqp_iterations == 6 and c.violation_tolerance == 1e-3
    d = SolverConfig.offline()
    assert d.max_sqp_iterations == 20 and d.kkt_tolerance == 1e-4 and d.max_qp_iterations == 200


def test_warm_start_shift():
    xs = np.arange(12, dtype=float).reshape(1, 6, 2)
    us = np.arange(5, dtype=float).reshape(1, 5, 1)
    wx, wu = shift_warm_start(xs, us, np.array([[-1.0, -2.0]]))
    assert np.array_equal(wx[0, 0], [-1.0, -2.0])
    assert np.array_equal(wx[0, 1:5], xs[0, 2:6])
    assert np.array_equal(wx[0, 5], xs[0, 5])
    assert np.array_equal(wu[0, :4, 0], [1, 2, 3, 4]) and wu[0, 4, 0] == 4


def test_warm_start_used():
    env = make_env("pendulum")
    x0 = np.array([[0.5, 0.0]])
    tv = QuadraticValue(np.eye(2))
    cold = solve_batch(env, x0, 10, tv)
    warm = solve_batch(env, x0, 10, tv, warm_states=cold.states, warm_controls=cold.controls)
    assert warm.iterations[0] <= 1
    assert np.allclose(warm.controls, cold.controls, atol=1e-6)


# -- QP subproblem -----------------------------------------------------------------

@pytest.mark.parametrize("backend", ["compiled", "numpy"])
def test_qp_one_stage_clipped(backend):
    qp = StageQP.single(Q=np.zeros((2, 1, 1)), S=np.zeros((1, 1, 1)), R=np.ones((1, 1, 1)),
                        q=np.zeros((2, 1)), r=-np.ones((1, 1)), A=np.ones((1, 1, 1)),
                        B=np.zeros((1, 1, 1)), e=np.zeros((1, 1)),
                        Gx=np.zeros((2, 1, 1)), Gu=-np.ones((1, 1, 1)), g=np.array([[0.5], [1.0]]))
    sol = solve_qp_subproblem(qp, backend=backend)
    assert sol.converged[0]
    assert sol.du[0, 0, 0] == pytest.approx(0.5, abs=1e-7)


def _random_lqr(rng, T=3, nx=2, nu=2, m=0, nb=1):
    def spd(n):
        M = rng.normal(size=(n, n))
        return M @ M.T + 0.1 * np.eye(n)
    Q = np.stack([np.stack([spd(nx) for _ in range(T + 1)]) for _ in range(nb)])
    R = np.stack([np.stack([spd(nu) for _ in range(T)]) for _ in range(nb)])
    S = 0.05 * rng.normal(size=(nb, T, nx, nu))
    A = 0.5 * rng.normal(size=(nb, T, nx, nx))
    B = rng.normal(size=(nb, T, nx, nu))
    e = rng.normal(size=(nb, T, nx))
    Gx = rng.normal(size=(nb, T + 1, m, nx))
    Gu = rng.normal(size=(nb, T, m, nu))
    # offsets chosen so that a random rollout is strictly feasible
    du = rng.normal(size=(nb, T, nu))
    dx = np.zeros((nb, T + 1, nx))
    for k in range(T):
        dx[:, k + 1] = np.einsum("bij,bj->bi", A[:, k], dx[:, k]) + np.einsum("bij,bj->bi", B[:, k], du[:, k]) + e[:, k]
    G = np.einsum("btij,btj->bti", Gx, dx)
    G[:, :-1] += np.einsum("btij,btj->bti", Gu, du)
    g = -G + rng.uniform(0.1, 1.0, size=(nb, T + 1, m))
    return StageQP(Q=Q, S=S, R=R, q=rng.normal(size=(nb, T + 1, nx)), r=rng.normal(size=(nb, T, nu)),
                   A=A, B=B, e=e, Gx=Gx, Gu=Gu, g=g)


def _dense_solution(qp, i=0):
    """Solve the equality-constrained QP with one dense KKT system."""
    T, nu = qp.r.shape[1:]
    nx = qp.q.shape[2]
    nz = (T + 1) * nx + T * nu
    H = np.zeros((nz, nz))
    h = np.zeros(nz)
    xi = lambda k: slice(k * nx, (k + 1) * nx)
    ui = lambda k: slice((T + 1) * nx + k * nu, (T + 1) * nx + (k + 1) * nu)
    for k in range(T + 1):
        H[xi(k), xi(k)] = qp.Q[i, k]
        h[xi(k)] = qp.q[i, k]
    for k in range(T):
        H[ui(k), ui(k)] = qp.R[i, k]
        H[xi(k), ui(k)] = qp.S[i, k]
        H[ui(k), xi(k)] = qp.S[i, k].T
        h[ui(k)] = qp.r[i, k]
    rows = (T + 1) * nx
    C = np.zeros((rows, nz))
    c = np.zeros(rows)
    C[:nx, xi(0)] = np.eye(nx)
    for k in range(T):
        r = slice((k + 1) * nx, (k + 2) * nx)
        C[r, xi(k + 1)] = np.eye(nx)
        C[r, xi(k)] = -qp.A[i, k]
        C[r, ui(k)] = -qp.B[i, k]
        c[r] = qp.e[i, k]
    K = np.block([[H, C.T], [C, np.zeros((rows, rows))]])
    z = np.linalg.solve(K, np.concatenate([-h, c]))[:nz]
    return z[:(T + 1) * nx].reshape(T + 1, nx), z[(T + 1) * nx:].reshape(T, nu)


@pytest.mark.parametrize("backend", ["compiled", "numpy"])
def test_qp_unconstrained_matches_dense_kkt(backend):
    rng = np.random.default_rng(0)
    for _ in range(5):
        qp = _random_lqr(rng)
        sol = solve_qp_subproblem(qp, backend=backend)
        dx, du = _dense_solution(qp)
        assert np.max(np.abs(sol.dx[0] - dx)) < 1e-8
        assert np.max(np.abs(sol.du[0] - du)) < 1e-8


@pytest.mark.parametrize("backend", ["compiled", "numpy"])
def test_qp_zero_gradient_zero_step(backend):
    qp = _random_lqr(np.random.default_rng(1), m=2)
    qp.q[:] = 0.0
    qp.r[:] = 0.0
    qp.e[:] = 0.0
    qp.g[:] = np.abs(qp.g) + 0.1
    sol = solve_qp_subproblem(qp, backend=backend)
    assert np.max(np.abs(sol.du)) < 1e-7 and np.max(np.abs(sol.dx)) < 1e-7


def test_qp_backends_agree_constrained():
    qp = _random_lqr(np.random.default_rng(2), T=6, m=3, nb=8)
    a = solve_qp_subproblem(qp, backend="compiled")
    b = solve_qp_subproblem(qp, backend="numpy")
    # random dense rows are ill conditioned near the boundary; both stop within 1e-6
    assert np.all(a.residual <= 1e-6) and np.all(b.residual <= 1e-6)
    assert np.max(np.abs(a.du - b.du)) < 1e-5
    # constraint satisfaction of the step
    G = np.einsum("btij,btj->bti", qp.Gx, a.dx) + qp.g
    G[:, :-1] += np.einsum("btij,btj->bti", qp.Gu, a.du)
    assert np.min(G) >= -1e-7


def test_qp_cap_reports_residual():
    qp = _random_lqr(np.random.default_rng(3), T=5, m=3)
    sol = solve_qp_subproblem(qp, tol=1e-14, max_iter=1)
    assert sol.iterations[0] <= 1
    assert np.isfinite(sol.residual[0])
