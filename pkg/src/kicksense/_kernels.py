"""Compiled inner loops shared by the Riccati solver, filter, smoother and simulator."""

from __future__ import annotations

import numpy as np
from numba import njit

# status codes returned by kernels
OK = 0
SINGULAR_INNOVATION = 1
SINGULAR_BACKWARD = 2


@njit(cache=True)
def _symmetrize(P):
    return 0.5 * (P + P.T)


@njit(cache=True)
def _cholesky_inplace(M):
    # returns False instead of raising so the caller can apply jitter
    n = M.shape[0]
    L = np.zeros_like(M)
    for j in range(n):
        s = M[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not s > 0.0:
            return L, False
        L[j, j] = np.sqrt(s)
        for i in range(j + 1, n):
            t = M[i, j]
            for k in range(j):
                t -= L[i, k] * L[j, k]
            L[i, j] = t / L[j, j]
    return L, True


@njit(cache=True)
def _chol_solve(L, B):
    n = L.shape[0]
    m = B.shape[1]
    X = B.copy()
    for c in range(m):
        for i in range(n):
            s = X[i, c]
            for k in range(i):
                s -= L[i, k] * X[k, c]
            X[i, c] = s / L[i, i]
        for i in range(n - 1, -1, -1):
            s = X[i, c]
            for k in range(i + 1, n):
                s -= L[k, i] * X[k, c]
            X[i, c] = s / L[i, i]
    return X


@njit(cache=True)
def _cov_step_into(A, C, Q, R, P, P_next, K, S, PCt, APCt, AP, joseph):
    # explicit loops: at these sizes allocation and LAPACK call overhead
    # dominate the arithmetic
    n = A.shape[0]
    m = C.shape[0]
    for i in range(n):
        for a in range(m):
            t = 0.0
            for j in range(n):
                t += P[i, j] * C[a, j]
            PCt[i, a] = t
    for a in range(m):
        for b in range(m):
            t = R[a, b]
            for j in range(n):
                t += C[a, j] * PCt[j, b]
            S[a, b] = t
    for a in range(m):
        for b in range(a):
            t = 0.5 * (S[a, b] + S[b, a])
            S[a, b] = t
            S[b, a] = t
    for i in range(n):
        for a in range(m):
            t = 0.0
            for j in range(n):
                t += A[i, j] * PCt[j, a]
            APCt[i, a] = t
    if m == 1:
        if not S[0, 0] > 0.0:
            return False
        inv = 1.0 / S[0, 0]
        for i in range(n):
            K[i, 0] = APCt[i, 0] * inv
    else:
        L, ok = _cholesky_inplace(S)
        if not ok:
            return False
        Kt = _chol_solve(L, APCt.T.copy())
        for i in range(n):
            for a in range(m):
                K[i, a] = Kt[a, i]
    if joseph:
        # (A - K C) P (A - K C)^T + K R K^T + Q, positive semidefinite by construction
        F = A.copy()
        for i in range(n):
            for j in range(n):
                for a in range(m):
                    F[i, j] -= K[i, a] * C[a, j]
        for i in range(n):
            for j in range(n):
                t = 0.0
                for k in range(n):
                    t += F[i, k] * P[k, j]
                AP[i, j] = t
        for i in range(n):
            for j in range(i, n):
                t = Q[i, j]
                for k in range(n):
                    t += AP[i, k] * F[j, k]
                for a in range(m):
                    for b in range(m):
                        t += K[i, a] * R[a, b] * K[j, b]
                P_next[i, j] = t
    else:
        for i in range(n):
            for j in range(n):
                t = 0.0
                for k in range(n):
                    t += A[i, k] * P[k, j]
                AP[i, j] = t
        for i in range(n):
            for j in range(i, n):
                t = Q[i, j]
                for k in range(n):
                    t += AP[i, k] * A[j, k]
                for a in range(m):
                    t -= K[i, a] * APCt[j, a]
                P_next[i, j] = t
    for i in range(n):
        for j in range(i):
            P_next[i, j] = P_next[j, i]
    return True


@njit(cache=True)
def cov_step(A, C, Q, R, P, joseph=False):
    """One a-priori covariance recursion step; returns (P_next, K, S)."""
    n = A.shape[0]
    m = C.shape[0]
    P_next = np.empty((n, n))
    K = np.empty((n, m))
    S = np.empty((m, m))
    ok = _cov_step_into(A, C, Q, R, P, P_next, K, S, np.empty((n, m)), np.empty((n, m)), np.empty((n, n)), joseph)
    if not ok:
        K[:] = np.nan
        P_next[:] = np.nan
    return P_next, K, S


@njit(cache=True)
def dare_iterate(A, C, Q, R, P0, rtol, max_iter, joseph=False):
    # Stops once the relative change is below rtol and the remaining distance
    # to the fixed point, extrapolated from the contraction rate over the last
    # `window` steps, is too.
    window = 256
    hist = np.full(window, np.inf)
    P = _symmetrize(P0.copy())
    change = np.inf
    floor = 64.0 * 2.220446049250313e-16
    n = A.shape[0]
    m = C.shape[0]
    P_next = np.empty((n, n))
    K = np.empty((n, m))
    S = np.empty((m, m))
    PCt = np.empty((n, m))
    APCt = np.empty((n, m))
    AP = np.empty((n, n))
    for it in range(1, max_iter + 1):
        if not _cov_step_into(A, C, Q, R, P, P_next, K, S, PCt, APCt, AP, joseph):
            return P, it, np.inf
        num = 0.0
        den = 0.0
        for i in range(n):
            for j in range(n):
                num += (P_next[i, j] - P[i, j]) ** 2
                den += P_next[i, j] ** 2
        num = np.sqrt(num)
        den = np.sqrt(den)
        P, P_next = P_next, P
        if den == 0.0:
            return P, it, 0.0
        change = num / den
        old = hist[it % window]
        hist[it % window] = change
        if change < rtol:
            if change < floor:
                return P, it, change
            if old < np.inf and change < old:
                rho = (change / old) ** (1.0 / window)
                if change * rho / (1.0 - rho) < rtol:
                    return P, it, change
    return P, max_iter, change


@njit(cache=True)
def covariance_run(A, C, Q, R, P0, n_steps, joseph=False):
    """Covariance recursion only; returns every a-priori covariance."""
    n = A.shape[0]
    m = C.shape[0]
    Ps = np.empty((n_steps + 1, n, n))
    Ps[0] = P0
    K = np.empty((n, m))
    S = np.empty((m, m))
    PCt = np.empty((n, m))
    APCt = np.empty((n, m))
    AP = np.empty((n, n))
    for k in range(n_steps):
        if not _cov_step_into(A, C, Q, R, Ps[k], Ps[k + 1], K, S, PCt, APCt, AP, joseph):
            Ps[k + 1:] = np.nan
            break
    return Ps


@njit(cache=True)
def filter_run(A, B, C, Q, R, x0, P0, y, u, stride, joseph=False):
    """Kalman filter in one-step-predictor form.

    Stores every a-priori mean and innovation, and the a-priori covariance at
    indices that are multiples of ``stride`` (plus the final one).
    """
    N = y.shape[0]
    n = A.shape[0]
    m = C.shape[0]
    xs = np.empty((N + 1, n))
    n_ck = N // stride + 1
    Ps = np.empty((n_ck, n, n))
    innov = np.empty((N, m))
    S_all = np.empty((N, m, m))
    x = x0.copy()
    x_new = np.empty(n)
    P = _symmetrize(P0.copy())
    P_next = np.empty((n, n))
    K = np.empty((n, m))
    S = np.empty((m, m))
    PCt = np.empty((n, m))
    APCt = np.empty((n, m))
    AP = np.empty((n, n))
    e = np.empty(m)
    l = B.shape[1]
    xs[0] = x
    Ps[0] = P
    for k in range(N):
        for a in range(m):
            t = y[k, a]
            for j in range(n):
                t -= C[a, j] * x[j]
            e[a] = t
        if not _cov_step_into(A, C, Q, R, P, P_next, K, S, PCt, APCt, AP, joseph):
            P_next[:] = np.nan
            K[:] = np.nan
        for i in range(n):
            t = 0.0
            for j in range(n):
                t += A[i, j] * x[j]
            for b in range(l):
                t += B[i, b] * u[k, b]
            for a in range(m):
                t += K[i, a] * e[a]
            x_new[i] = t
        x, x_new = x_new, x
        P, P_next = P_next, P
        innov[k] = e
        S_all[k] = S
        xs[k + 1] = x
        if (k + 1) % stride == 0:
            Ps[(k + 1) // stride] = P
    return xs, Ps, innov, S_all, P


@njit(cache=True)
def steady_filter_run(A, B, C, K, x0, y, u):
    """Fixed-gain predictor; returns innovations and final mean."""
    N = y.shape[0]
    m = C.shape[0]
    innov = np.empty((N, m))
    x = x0.copy()
    for k in range(N):
        e = y[k] - C @ x
        x = A @ x + B @ u[k] + K @ e
        innov[k] = e
    return innov, x


@njit(cache=True)
def _scaled_solve(P_pred, B, jitter_state):
    # Solve P_pred X = B with diagonal (Jacobi) scaling of P_pred. States with
    # zero predicted variance are deterministic and get zero rows in X.
    n = P_pred.shape[0]
    idx = np.empty(n, dtype=np.int64)
    r = 0
    for i in range(n):
        if P_pred[i, i] > 0.0:
            idx[r] = i
            r += 1
    X = np.zeros_like(B)
    if r == 0:
        return X, True
    d = np.empty(r)
    Ps = np.empty((r, r))
    Bs = np.empty((r, B.shape[1]))
    for a in range(r):
        d[a] = np.sqrt(P_pred[idx[a], idx[a]])
    for a in range(r):
        for b in range(r):
            Ps[a, b] = P_pred[idx[a], idx[b]] / (d[a] * d[b])
        Bs[a] = B[idx[a]] / d[a]
    L, ok = _cholesky_inplace(Ps)
    if not ok:
        if jitter_state[0] > 0:
            return X, False
        jitter_state[0] = 1
        Ps = Ps + 1e-14 * np.trace(Ps) * np.eye(r)
        L, ok = _cholesky_inplace(Ps)
        if not ok:
            return X, False
    Xs = _chol_solve(L, Bs)
    for a in range(r):
        X[idx[a]] = Xs[a] / d[a]
    return X, True


@njit(cache=True)
def _matvec_add(M, v, out, scale):
    # out += scale * M @ v
    for i in range(M.shape[0]):
        t = 0.0
        for j in range(M.shape[1]):
            t += M[i, j] * v[j]
        out[i] += scale * t


@njit(cache=True)
def smoother_block(A, C, R, xs, Ps, innov, xs_s_next, Ps_s_next, k_lo, k_hi, out_x, out_P, p_off, jitter_state):
    """Backward RTS pass over ``k_hi-1 .. k_lo``.

    ``Ps[k - k_lo]`` holds the a-priori covariance at index ``k`` for
    ``k_lo <= k <= k_hi``. The a-posteriori estimate at each step is rebuilt
    from the stored a-priori quantities and innovation.
    """
    n = A.shape[0]
    m = C.shape[0]
    x_next = xs_s_next.copy()
    P_next = Ps_s_next.copy()
    PCt = np.empty((n, m))
    S = np.empty((m, m))
    W = np.empty((n, m))
    x_post = np.empty(n)
    P_post = np.empty((n, n))
    AP = np.empty((n, n))
    D = np.empty((n, n))
    GD = np.empty((n, n))
    dxv = np.empty(n)
    for k in range(k_hi - 1, k_lo - 1, -1):
        P = Ps[k - k_lo]
        for i in range(n):
            for a in range(m):
                t = 0.0
                for j in range(n):
                    t += P[i, j] * C[a, j]
                PCt[i, a] = t
        for a in range(m):
            for b in range(m):
                t = R[a, b]
                for j in range(n):
                    t += C[a, j] * PCt[j, b]
                S[a, b] = t
        if m == 1:
            inv = 1.0 / S[0, 0]
            for i in range(n):
                W[i, 0] = PCt[i, 0] * inv
        else:
            L, ok = _cholesky_inplace(_symmetrize(S))
            if not ok:
                return SINGULAR_INNOVATION, k
            Wt = _chol_solve(L, PCt.T.copy())
            for i in range(n):
                for a in range(m):
                    W[i, a] = Wt[a, i]
        for i in range(n):
            t = xs[k, i]
            for a in range(m):
                t += W[i, a] * innov[k, a]
            x_post[i] = t
        for i in range(n):
            for j in range(i, n):
                t = P[i, j]
                for a in range(m):
                    t -= W[i, a] * PCt[j, a]
                P_post[i, j] = t
                P_post[j, i] = t
        for i in range(n):
            for j in range(n):
                t = 0.0
                for q in range(n):
                    t += A[i, q] * P_post[q, j]
                AP[i, j] = t
        P_pred = Ps[k + 1 - k_lo]
        # gain transpose: P_pred^-1 A P_post
        Gt, ok = _scaled_solve(P_pred, AP, jitter_state)
        if not ok:
            return SINGULAR_BACKWARD, k
        for i in range(n):
            dxv[i] = x_next[i] - xs[k + 1, i]
        for i in range(n):
            t = x_post[i]
            for j in range(n):
                t += Gt[j, i] * dxv[j]
            x_next[i] = t
        for i in range(n):
            for j in range(n):
                D[i, j] = P_next[i, j] - P_pred[i, j]
        for i in range(n):
            for j in range(n):
                t = 0.0
                for q in range(n):
                    t += Gt[q, i] * D[q, j]
                GD[i, j] = t
        for i in range(n):
            for j in range(i, n):
                t = P_post[i, j]
                for q in range(n):
                    t += GD[i, q] * Gt[q, j]
                P_next[i, j] = t
                P_next[j, i] = t
        out_x[k] = x_next
        out_P[k - p_off] = P_next
    return OK, -1


@njit(cache=True)
def simulate_open(A, B, C, Lq, Lr, x0, u, noise_w, noise_v, kick_idx, kick_dx):
    """Open-loop simulation with pre-drawn standard normals."""
    N = u.shape[0]
    n = A.shape[0]
    m = C.shape[0]
    xs = np.empty((N, n))
    ys = np.empty((N, m))
    x = x0.copy()
    x_new = np.empty(n)
    j = 0
    for k in range(N):
        while j < kick_idx.shape[0] and kick_idx[j] == k:
            for i in range(n):
                x[i] += kick_dx[j, i]
            j += 1
        xs[k] = x
        for a in range(m):
            ys[k, a] = 0.0
        _matvec_add(C, x, ys[k], 1.0)
        _matvec_add(Lr, noise_v[k], ys[k], 1.0)
        x_new[:] = 0.0
        _matvec_add(A, x, x_new, 1.0)
        _matvec_add(B, u[k], x_new, 1.0)
        _matvec_add(Lq, noise_w[k], x_new, 1.0)
        x, x_new = x_new, x
    return xs, ys, x


@njit(cache=True)
def simulate_closed(A_h, B_h, C, Lq_h, Lr_h, A_df, K_df, K_c, x0, xr0, n_sub,
                    noise_w, noise_v, kick_idx, kick_dx):
    """Closed-loop simulation with the regulator sub-stepped ``n_sub`` times per sample.

    ``noise_w`` has shape (N * n_sub, r_w) and ``noise_v`` (N * n_sub, r_v).
    The recorded measurement carries the mean of the fine-step measurement
    noise, the recorded input is the mean of the held regulator outputs.
    """
    N = noise_w.shape[0] // n_sub
    n = A_h.shape[0]
    nr = A_df.shape[0]
    m = C.shape[0]
    l = K_c.shape[0]
    xs = np.empty((N, n))
    ys = np.empty((N, m))
    us = np.empty((N, l))
    x = x0.copy()
    xr = xr0.copy()
    x_new = np.empty(n)
    xr_new = np.empty(nr)
    v = np.empty(m)
    y_fine = np.empty(m)
    uu = np.empty(l)
    v_acc = np.empty(m)
    u_acc = np.empty(l)
    j = 0
    for k in range(N):
        while j < kick_idx.shape[0] and kick_idx[j] == k:
            for i in range(n):
                x[i] += kick_dx[j, i]
            j += 1
        xs[k] = x
        v_acc[:] = 0.0
        u_acc[:] = 0.0
        for s in range(n_sub):
            i = k * n_sub + s
            v[:] = 0.0
            _matvec_add(Lr_h, noise_v[i], v, 1.0)
            y_fine[:] = v
            _matvec_add(C, x, y_fine, 1.0)
            uu[:] = 0.0
            _matvec_add(K_c, xr, uu, -1.0)
            xr_new[:] = 0.0
            _matvec_add(A_df, xr, xr_new, 1.0)
            _matvec_add(K_df, y_fine, xr_new, 1.0)
            x_new[:] = 0.0
            _matvec_add(A_h, x, x_new, 1.0)
            _matvec_add(B_h, uu, x_new, 1.0)
            _matvec_add(Lq_h, noise_w[i], x_new, 1.0)
            x, x_new = x_new, x
            xr, xr_new = xr_new, xr
            v_acc += v
            u_acc += uu
        for a in range(m):
            ys[k, a] = v_acc[a] / n_sub
        _matvec_add(C, xs[k], ys[k], 1.0)
        for b in range(l):
            us[k, b] = u_acc[b] / n_sub
    return xs, ys, us, x, xr
