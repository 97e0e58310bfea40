"""Compiled per-problem kernel for the stagewise QP subproblem.

Same algorithm as the numpy reference ``solver._solve_qp_numpy`` (Riccati
factorization inside a Mehrotra interior-point loop), but each problem of the
batch is solved by a jitted loop over preallocated buffers.  On stacks of 2x2
matrices the numpy version is dominated by per-call overhead and small
allocations, which this avoids.
"""
from __future__ import annotations

import numpy as np
from numba import njit

_STAGNATION = 3


@njit(cache=True, error_model="numpy")
def _chol_inv(M, L, out):
    """``out = M^{-1}`` for small SPD ``M`` (Cholesky); shifts the diagonal on breakdown."""
    n = M.shape[0]
    if n == 1 and M[0, 0] > 0.0:
        out[0, 0] = 1.0 / M[0, 0]
        return
    scale = 0.0
    for i in range(n):
        for j in range(n):
            scale = max(scale, abs(M[i, j]))
    shift = 0.0
    for attempt in range(6):
        ok = True
        for j in range(n):
            d = M[j, j] + shift
            for k in range(j):
                d -= L[j, k] * L[j, k]
            if not d > 0.0:
                ok = False
                break
            L[j, j] = np.sqrt(d)
            for i in range(j + 1, n):
                v = M[i, j]
                for k in range(j):
                    v -= L[i, k] * L[j, k]
                L[i, j] = v / L[j, j]
        if ok:
            break
        shift = (1e-13 if shift == 0.0 else shift * 1e3) * (scale + 1.0)
    # out = L^{-T} L^{-1}, column by column (forward then backward substitution)
    for col in range(n):
        for i in range(n):
            v = 1.0 if i == col else 0.0
            for k in range(i):
                v -= L[i, k] * out[k, col]
            out[i, col] = v / L[i, i]
        for i in range(n - 1, -1, -1):
            v = out[i, col]
            for k in range(i + 1, n):
                v -= L[k, i] * out[k, col]
            out[i, col] = v / L[i, i]


@njit(cache=True, error_model="numpy")
def _factor(Qt, St, Rt, A, B, K, Qinv, V, VA, VB, qux, quu, L):
    T = Rt.shape[0]
    nx = A.shape[1]
    nu = B.shape[2]
    for i in range(nx):
        for j in range(nx):
            V[T, i, j] = Qt[T, i, j]
    for k in range(T - 1, -1, -1):
        Vn = V[k + 1]
        Ak = A[k]
        Bk = B[k]
        for i in range(nx):
            for j in range(nx):
                acc = 0.0
                for l in range(nx):
                    acc += Vn[i, l] * Ak[l, j]
                VA[i, j] = acc
            for j in range(nu):
                acc = 0.0
                for l in range(nx):
                    acc += Vn[i, l] * Bk[l, j]
                VB[i, j] = acc
        for i in range(nu):
            for j in range(nx):
                acc = St[k, j, i]
                for l in range(nx):
                    acc += Bk[l, i] * VA[l, j]
                qux[i, j] = acc
            for j in range(nu):
                acc = Rt[k, i, j]
                for l in range(nx):
                    acc += Bk[l, i] * VB[l, j]
                quu[i, j] = acc
        for i in range(nu):
            for j in range(i + 1, nu):
                a = 0.5 * (quu[i, j] + quu[j, i])
                quu[i, j] = a
                quu[j, i] = a
        _chol_inv(quu, L, Qinv[k])
        Kk = K[k]
        for i in range(nu):
            for j in range(nx):
                acc = 0.0
                for l in range(nu):
                    acc -= Qinv[k, i, l] * qux[l, j]
                Kk[i, j] = acc
        Vk = V[k]
        for i in range(nx):
            for j in range(nx):
                acc = Qt[k, i, j]
                for l in range(nx):
                    acc += Ak[l, i] * VA[l, j]
                for l in range(nu):
                    acc += qux[l, i] * Kk[l, j]
                Vk[i, j] = acc
        for i in range(nx):
            for j in range(i + 1, nx):
                a = 0.5 * (Vk[i, j] + Vk[j, i])
                Vk[i, j] = a
                Vk[j, i] = a


@njit(cache=True, error_model="numpy")
def _solve(K, Qinv, V, A, B, hx, hu, e, use_e, dx, du, kff, v, w, qu):
    T = hu.shape[0]
    nu = hu.shape[1]
    nx = hx.shape[1]
    for i in range(nx):
        v[i] = hx[T, i]
    for k in range(T - 1, -1, -1):
        if use_e:
            for i in range(nx):
                acc = v[i]
                for l in range(nx):
                    acc += V[k + 1, i, l] * e[k, l]
                w[i] = acc
            for i in range(nx):
                v[i] = w[i]
        for i in range(nu):
            acc = hu[k, i]
            for l in range(nx):
                acc += B[k, l, i] * v[l]
            qu[i] = acc
        for i in range(nu):
            acc = 0.0
            for l in range(nu):
                acc -= Qinv[k, i, l] * qu[l]
            kff[k, i] = acc
        for i in range(nx):
            acc = hx[k, i]
            for l in range(nx):
                acc += A[k, l, i] * v[l]
            for l in range(nu):
                acc += K[k, l, i] * qu[l]
            w[i] = acc
        for i in range(nx):
            v[i] = w[i]
    for i in range(nx):
        dx[0, i] = 0.0
    for k in range(T):
        for i in range(nu):
            acc = kff[k, i]
            for l in range(nx):
                acc += K[k, i, l] * dx[k, l]
            du[k, i] = acc
        for i in range(nx):
            acc = e[k, i] if use_e else 0.0
            for l in range(nx):
                acc += A[k, i, l] * dx[k, l]
            for l in range(nu):
                acc += B[k, i, l] * du[k, l]
            dx[k + 1, i] = acc


@njit(cache=True, error_model="numpy")
def _cons(Gx, Gu, g, dx, du, with_g, out):
    T = Gu.shape[0]
    m = g.shape[1]
    nx = dx.shape[1]
    nu = du.shape[1]
    for k in range(T + 1):
        for i in range(m):
            acc = g[k, i] if with_g else 0.0
            for l in range(nx):
                acc += Gx[k, i, l] * dx[k, l]
            if k < T:
                for l in range(nu):
                    acc += Gu[k, i, l] * du[k, l]
            out[k, i] = acc


@njit(cache=True, error_model="numpy")
def _grad(Q, S, R, q, r, Gx, Gu, y, dx, du, gx, gu):
    """Objective gradient minus ``G^T y`` (pass y = 0 for the plain gradient)."""
    T = R.shape[0]
    nx = dx.shape[1]
    nu = du.shape[1]
    m = y.shape[1]
    for k in range(T + 1):
        for i in range(nx):
            acc = q[k, i]
            for l in range(nx):
                acc += Q[k, i, l] * dx[k, l]
            if k < T:
                for l in range(nu):
                    acc += S[k, i, l] * du[k, l]
            for l in range(m):
                acc -= Gx[k, l, i] * y[k, l]
            gx[k, i] = acc
        if k < T:
            for i in range(nu):
                acc = r[k, i]
                for l in range(nx):
                    acc += S[k, l, i] * dx[k, l]
                for l in range(nu):
                    acc += R[k, i, l] * du[k, l]
                for l in range(m):
                    acc -= Gu[k, l, i] * y[k, l]
                gu[k, i] = acc


@njit(cache=True, error_model="numpy")
def _reduced(A, B, gx, gu, nu_out, res):
    T = gu.shape[0]
    nx = gx.shape[1]
    nu = gu.shape[1]
    for i in range(nx):
        nu_out[T, i] = gx[T, i]
    for k in range(T - 1, -1, -1):
        for i in range(nu):
            acc = gu[k, i]
            for l in range(nx):
                acc += B[k, l, i] * nu_out[k + 1, l]
            res[k, i] = acc
        for i in range(nx):
            acc = gx[k, i]
            for l in range(nx):
                acc += A[k, l, i] * nu_out[k + 1, l]
            nu_out[k, i] = acc


@njit(cache=True, error_model="numpy")
def _boundary(v, dv):
    a = np.inf
    for i in range(v.shape[0]):
        for j in range(v.shape[1]):
            if dv[i, j] < 0.0:
                a = min(a, -v[i, j] / dv[i, j])
    return a


@njit(cache=True, error_model="numpy")
def _absmax(a):
    out = 0.0
    for x in a.ravel():
        out = max(out, abs(x))
    return out


@njit(cache=True, error_model="numpy")
def _solve_one(Q, S, R, q, r, A, B, e, Gx, Gu, g, tol, max_iter, dx_out, du_out, lam_out, nu_out):
    T, nu = r.shape
    nx = q.shape[1]
    m = g.shape[1]
    K = np.zeros((T, nu, nx))
    Qinv = np.zeros((T, nu, nu))
    V = np.zeros((T + 1, nx, nx))
    VA = np.zeros((nx, nx))
    VB = np.zeros((nx, nu))
    qux = np.zeros((nu, nx))
    quu = np.zeros((nu, nu))
    L = np.zeros((nu, nu))
    kff = np.zeros((T, nu))
    v = np.zeros(nx)
    w = np.zeros(nx)
    qu = np.zeros(nu)
    gx = np.zeros((T + 1, nx))
    gu = np.zeros((T, nu))
    res = np.zeros((T, nu))
    costate = np.zeros((T + 1, nx))

    if m == 0:
        none = np.zeros((T + 1, 0))
        _factor(Q, S, R, A, B, K, Qinv, V, VA, VB, qux, quu, L)
        _solve(K, Qinv, V, A, B, q, r, e, True, dx_out, du_out, kff, v, w, qu)
        _grad(Q, S, R, q, r, Gx, Gu, none, dx_out, du_out, gx, gu)
        _reduced(A, B, gx, gu, nu_out, res)
        return 1, _absmax(res)

    dx = np.zeros((T + 1, nx))
    du = np.zeros((T, nu))
    for k in range(T):
        for i in range(nx):
            acc = e[k, i]
            for l in range(nx):
                acc += A[k, i, l] * dx[k, l]
            dx[k + 1, i] = acc
    z = np.zeros((T + 1, m))
    _cons(Gx, Gu, g, dx, du, True, z)
    s = np.maximum(z, 1.0)
    lam = np.ones((T + 1, m))
    grad_scale = 1.0 + max(_absmax(q), _absmax(r))
    n_rows = (T + 1) * m

    best_res = np.inf
    best_it = 0
    iters = 0
    Qt = np.zeros_like(Q)
    St = np.zeros_like(S)
    Rt = np.zeros_like(R)
    hx = np.zeros((T + 1, nx))
    hu = np.zeros((T, nu))
    ddx = np.zeros((T + 1, nx))
    ddu = np.zeros((T, nu))
    Gd = np.zeros((T + 1, m))
    rp = np.zeros((T + 1, m))
    rc = np.zeros((T + 1, m))
    y = np.zeros((T + 1, m))
    ds_a = np.zeros((T + 1, m))
    dl_a = np.zeros((T + 1, m))
    ds = np.zeros((T + 1, m))
    dlam = np.zeros((T + 1, m))
    W = np.zeros((T + 1, m))

    for it in range(max_iter + 1):
        _cons(Gx, Gu, g, dx, du, True, z)
        for k in range(T + 1):
            for i in range(m):
                rp[k, i] = z[k, i] - s[k, i]
        _grad(Q, S, R, q, r, Gx, Gu, lam, dx, du, gx, gu)
        _reduced(A, B, gx, gu, costate, res)
        lam_scale = 1.0 + _absmax(lam)
        comp = 0.0
        for k in range(T + 1):
            for i in range(m):
                comp = max(comp, abs(s[k, i] * lam[k, i]))
        stat = _absmax(res) / max(grad_scale, lam_scale)
        resid = max(stat, max(_absmax(rp), comp / lam_scale))
        if resid < best_res:
            best_res = resid
            best_it = it
            dx_out[:] = dx
            du_out[:] = du
            lam_out[:] = lam
        if best_res <= tol or it - best_it >= _STAGNATION or it == max_iter:
            break
        mu = 0.0
        for k in range(T + 1):
            for i in range(m):
                mu += s[k, i] * lam[k, i]
                W[k, i] = lam[k, i] / s[k, i]
        mu /= n_rows
        for k in range(T + 1):
            for i in range(nx):
                for j in range(nx):
                    acc = Q[k, i, j]
                    for l in range(m):
                        acc += Gx[k, l, i] * W[k, l] * Gx[k, l, j]
                    Qt[k, i, j] = acc
            if k < T:
                for i in range(nx):
                    for j in range(nu):
                        acc = S[k, i, j]
                        for l in range(m):
                            acc += Gx[k, l, i] * W[k, l] * Gu[k, l, j]
                        St[k, i, j] = acc
                for i in range(nu):
                    for j in range(nu):
                        acc = R[k, i, j]
                        for l in range(m):
                            acc += Gu[k, l, i] * W[k, l] * Gu[k, l, j]
                        Rt[k, i, j] = acc
        _factor(Qt, St, Rt, A, B, K, Qinv, V, VA, VB, qux, quu, L)

        # predictor (affine) direction; linear terms h = grad + G^T y
        for k in range(T + 1):
            for i in range(m):
                rc[k, i] = s[k, i] * lam[k, i]
                y[k, i] = lam[k, i] - (rc[k, i] + lam[k, i] * rp[k, i]) / s[k, i]
        _grad(Q, S, R, q, r, Gx, Gu, y, dx, du, hx, hu)
        _solve(K, Qinv, V, A, B, hx, hu, e, False, ddx, ddu, kff, v, w, qu)
        _cons(Gx, Gu, g, ddx, ddu, False, Gd)
        for k in range(T + 1):
            for i in range(m):
                ds_a[k, i] = Gd[k, i] + rp[k, i]
                dl_a[k, i] = -(rc[k, i] + lam[k, i] * ds_a[k, i]) / s[k, i]
        a_p = min(1.0, _boundary(s, ds_a))
        a_d = min(1.0, _boundary(lam, dl_a))
        mu_aff = 0.0
        for k in range(T + 1):
            for i in range(m):
                mu_aff += (s[k, i] + a_p * ds_a[k, i]) * (lam[k, i] + a_d * dl_a[k, i])
        mu_aff /= n_rows
        sigma = min(1.0, max(0.0, (mu_aff / max(mu, 1e-300)) ** 3))

        # corrector
        for k in range(T + 1):
            for i in range(m):
                rc[k, i] = s[k, i] * lam[k, i] + ds_a[k, i] * dl_a[k, i] - sigma * mu
                y[k, i] = lam[k, i] - (rc[k, i] + lam[k, i] * rp[k, i]) / s[k, i]
        _grad(Q, S, R, q, r, Gx, Gu, y, dx, du, hx, hu)
        _solve(K, Qinv, V, A, B, hx, hu, e, False, ddx, ddu, kff, v, w, qu)
        _cons(Gx, Gu, g, ddx, ddu, False, Gd)
        for k in range(T + 1):
            for i in range(m):
                ds[k, i] = Gd[k, i] + rp[k, i]
                dlam[k, i] = -(rc[k, i] + lam[k, i] * ds[k, i]) / s[k, i]
        alpha = min(1.0, 0.995 * min(_boundary(s, ds), _boundary(lam, dlam)))
        if not np.isfinite(alpha):
            break
        for k in range(T + 1):
            for i in range(nx):
                dx[k, i] += alpha * ddx[k, i]
            for i in range(m):
                s[k, i] += alpha * ds[k, i]
                lam[k, i] += alpha * dlam[k, i]
        for k in range(T):
            for i in range(nu):
                du[k, i] += alpha * ddu[k, i]
        iters += 1

    # costates of the returned iterate
    _grad(Q, S, R, q, r, Gx, Gu, lam_out, dx_out, du_out, gx, gu)
    _reduced(A, B, gx, gu, nu_out, res)
    return iters, best_res


@njit(cache=True, error_model="numpy")
def solve_batch_qp(Q, S, R, q, r, A, B, e, Gx, Gu, g, tol, max_iter):
    nb, T1, nx = q.shape
    T = T1 - 1
    nu = r.shape[2]
    m = g.shape[2]
    dx = np.zeros((nb, T1, nx))
    du = np.zeros((nb, T, nu))
    lam = np.zeros((nb, T1, m))
    costate = np.zeros((nb, T1, nx))
    iters = np.zeros(nb, np.int64)
    resid = np.zeros(nb)
    for i in range(nb):
        it, rs = _solve_one(Q[i], S[i], R[i], q[i], r[i], A[i], B[i], e[i], Gx[i], Gu[i], g[i],
                            tol, max_iter, dx[i], du[i], lam[i], costate[i])
        iters[i] = it
        resid[i] = rs
    return dx, du, lam, costate, iters, resid
