"""Algebraic and recursive Riccati equations for control and estimation."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import matrix_balance, solve_continuous_lyapunov

from . import _kernels
from .lti import is_stabilizable

logger = logging.getLogger(__name__)


class RiccatiError(ArithmeticError):
    """Raised when a Riccati solver cannot produce an admissible solution."""


@dataclass(frozen=True)
class RiccatiSolution:
    X: np.ndarray
    iterations: int
    residual: float


def _sym(X: np.ndarray) -> np.ndarray:
    return 0.5 * (X + X.T)


def care_residual(V, A, B, M, N) -> float:
    """Relative Frobenius residual of ``V A + A^T V - V B N^-1 B^T V + M``."""
    res = V @ A + A.T @ V - V @ B @ np.linalg.solve(N, B.T @ V) + M
    scale = np.linalg.norm(M)
    if scale == 0.0:
        scale = max(np.linalg.norm(V @ A), 1.0)
    return float(np.linalg.norm(res) / scale)


def _care_scaling(A: np.ndarray, M: np.ndarray) -> np.ndarray:
    # diagonal scaling from balancing A; bounded so M keeps a sane range
    _, (scale, _) = matrix_balance(A, permute=False, separate=True)
    return scale


def _bass_gain(A, B, N) -> np.ndarray | None:
    n = A.shape[0]
    # -(A + beta I) must be Hurwitz for P to be positive definite
    beta = max(-np.min(np.linalg.eigvals(A).real), 0.0) + 1.0
    Ab = A + beta * np.eye(n)
    # Ab P + P Ab^T = 2 B N^-1 B^T  ->  K = N^-1 B^T P^-1 stabilizes A - B K
    P = solve_continuous_lyapunov(Ab, 2.0 * B @ np.linalg.solve(N, B.T))
    try:
        return np.linalg.solve(N, B.T @ np.linalg.inv(P))
    except np.linalg.LinAlgError:
        return None


def _is_hurwitz(A) -> bool:
    return bool(np.all(np.linalg.eigvals(A).real < 0))


def _care_by_ode(A, B, M, N, rtol, max_time=None) -> tuple[np.ndarray, int]:
    """Integrate ``dV/dt = V A + A^T V - V B N^-1 B^T V + M`` to stationarity."""
    n = A.shape[0]
    BNB = B @ np.linalg.solve(N, B.T)

    def rhs(_t, v):
        V = v.reshape(n, n)
        dV = V @ A + A.T @ V - V @ BNB @ V + M
        return _sym(dV).ravel()

    rate = max(np.max(np.abs(np.linalg.eigvals(A))), 1.0)
    horizon = 10.0 / rate
    V = np.zeros((n, n))
    # the start is exactly zero, so a purely relative tolerance is undefined
    atol = 1e-13 * max(np.abs(M).max(), np.finfo(float).tiny)
    for chunk in range(1, 61):
        sol = solve_ivp(rhs, (0.0, horizon), V.ravel(), method="BDF", rtol=1e-10, atol=atol)
        if not sol.success:
            raise RiccatiError(f"Riccati ODE integration failed: {sol.message}")
        V_new = _sym(sol.y[:, -1].reshape(n, n))
        change = np.linalg.norm(V_new - V) / max(np.linalg.norm(V_new), np.finfo(float).tiny)
        V = V_new
        if change < rtol:
            return V, chunk
        horizon *= 2.0
    raise RiccatiError("Riccati ODE did not reach stationarity")


def solve_care(A, B, M, N, tol: float = 1e-10, max_iter: int = 200) -> RiccatiSolution:
    """Stabilizing solution of ``0 = V A + A^T V - V B N^-1 B^T V + M``.

    Newton-Kleinman iteration, each step a Lyapunov solve (Bartels-Stewart).
    The iteration runs on a diagonally balanced copy of the system. If no
    stabilizing start gain can be found the Riccati ODE is integrated instead.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    M = _sym(np.atleast_2d(np.asarray(M, dtype=float)))
    N = _sym(np.atleast_2d(np.asarray(N, dtype=float)))
    if np.any(np.linalg.eigvalsh(N) <= 0):
        raise RiccatiError("N must be positive definite")
    if np.min(np.linalg.eigvalsh(M)) < -1e-12 * max(np.abs(M).max(), 1.0):
        raise RiccatiError("M must be positive semidefinite")
    if not is_stabilizable(A, B):
        raise RiccatiError("(A, B) is not stabilizable")

    d = _care_scaling(A, M)
    As = A * d[None, :] / d[:, None]
    Bs = B / d[:, None]
    Ms = M * np.outer(d, d)

    # Newton from K = 0 on a barely stable plant starts from a huge V and
    # needs many halving steps, so the Bass gain is preferred when it exists
    K = _bass_gain(As, Bs, N)
    if (K is None or not _is_hurwitz(As - Bs @ K)) and _is_hurwitz(As):
        K = np.zeros((B.shape[1], A.shape[0]))
    if K is None or not _is_hurwitz(As - Bs @ K):
        logger.info("no stabilizing start gain, integrating the Riccati ODE")
        Vs, its = _care_by_ode(As, Bs, Ms, N, rtol=tol)
    else:
        Vs = None
        for its in range(1, max_iter + 1):
            Ak = As - Bs @ K
            rhs = -(Ms + K.T @ N @ K)
            V_new = _sym(solve_continuous_lyapunov(Ak.T, rhs))
            K = np.linalg.solve(N, Bs.T @ V_new)
            if Vs is not None:
                change = np.linalg.norm(V_new - Vs) / max(np.linalg.norm(V_new), np.finfo(float).tiny)
                Vs = V_new
                if change < tol * 1e-2 or (change < tol and care_residual(Vs, As, Bs, Ms, N) < tol):
                    break
            else:
                Vs = V_new
        else:
            raise RiccatiError(f"Newton-Kleinman did not converge in {max_iter} iterations")

    V = _sym(Vs / np.outer(d, d))
    closed = A - B @ np.linalg.solve(N, B.T @ V)
    if np.any(np.linalg.eigvals(closed).real >= 0) and np.any(M):
        raise RiccatiError("solution is not stabilizing")
    residual = care_residual(Vs, As, Bs, Ms, N)
    return RiccatiSolution(X=V, iterations=its, residual=residual)


def solve_filter_care(A, G, C, R) -> RiccatiSolution:
    """Stationary Kalman-Bucy error covariance, by duality with :func:`solve_care`."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    G = np.atleast_2d(np.asarray(G, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    return solve_care(A.T, C.T, G @ G.T, np.atleast_2d(R))


def dare_filter_fixed_point(
    A_d, C, Q_d, R_d, Sigma0=None, rtol: float = 1e-12, max_iter: int = 1_000_000
) -> RiccatiSolution:
    """Steady a-priori error covariance by iterating the filter covariance update.

    Iterates ``S <- A S A^T + Q - A S C^T (C S C^T + R)^-1 C S A^T`` until the
    relative Frobenius change falls below ``rtol``.
    """
    A_d = np.atleast_2d(np.asarray(A_d, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    Q_d = _sym(np.atleast_2d(np.asarray(Q_d, dtype=float)))
    R_d = np.atleast_2d(np.asarray(R_d, dtype=float))
    if Sigma0 is None:
        Sigma0 = Q_d.copy()
    Sigma0 = np.atleast_2d(np.asarray(Sigma0, dtype=float))
    X, its, change = _kernels.dare_iterate(A_d, C, Q_d, R_d, Sigma0, rtol, int(max_iter))
    if not change < rtol:
        raise RiccatiError(
            f"filter Riccati iteration did not converge in {max_iter} steps (last change {change:.3g})"
        )
    X = _sym(X)
    nxt, _, _ = _kernels.cov_step(A_d, C, Q_d, R_d, X)
    res = np.linalg.norm(nxt - X) / max(np.linalg.norm(X), np.finfo(float).tiny)
    return RiccatiSolution(X=X, iterations=int(its), residual=float(res))


def riccati_rhs(Sigma, A, G, C, R) -> np.ndarray:
    GGt = G @ G.T
    return A @ Sigma + Sigma @ A.T + GGt - Sigma @ C.T @ np.linalg.solve(R, C @ Sigma)


def riccati_ode_step(Sigma, A, G, C, R, dt: float) -> np.ndarray:
    """One classical Runge-Kutta step of the filter Riccati differential equation.

    Raises :class:`RiccatiError` if the result loses positive semidefiniteness,
    which signals a step size that is too large.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    A, G, C, R = (np.atleast_2d(np.asarray(v, dtype=float)) for v in (A, G, C, R))
    k1 = riccati_rhs(Sigma, A, G, C, R)
    k2 = riccati_rhs(Sigma + 0.5 * dt * k1, A, G, C, R)
    k3 = riccati_rhs(Sigma + 0.5 * dt * k2, A, G, C, R)
    k4 = riccati_rhs(Sigma + dt * k3, A, G, C, R)
    out = _sym(Sigma + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4))
    tr = np.trace(out)
    if np.min(np.linalg.eigvalsh(out)) < -1e-10 * max(abs(tr), np.finfo(float).tiny):
        raise RiccatiError("covariance lost positive semidefiniteness; reduce the step size")
    return out


def _balance_scale(A: np.ndarray) -> np.ndarray:
    _, (scale, _) = matrix_balance(A, permute=False, separate=True)
    return scale


def discrete_lyapunov(A, Q) -> np.ndarray:
    """Solution of ``X = A X A^T + Q`` for Schur-stable ``A``.

    Solved as a dense linear system in vec(X) on a balanced copy of ``A``.
    Bartels-Stewart implementations perturb the problem when eigenvalues of
    lightly damped modes nearly cancel, which costs most of the accuracy here.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    Q = _sym(np.atleast_2d(np.asarray(Q, dtype=float)))
    n = A.shape[0]
    d = _balance_scale(A)
    As = A / d[:, None] * d[None, :]
    Qs = Q / np.outer(d, d)
    K = np.eye(n * n) - np.kron(As, As)
    Xs = np.linalg.solve(K, Qs.ravel()).reshape(n, n)
    return _sym(Xs * np.outer(d, d))


def continuous_lyapunov(A, W) -> np.ndarray:
    """Solution of ``A X + X A^T + W = 0`` for Hurwitz ``A`` (same approach)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    W = _sym(np.atleast_2d(np.asarray(W, dtype=float)))
    n = A.shape[0]
    d = _balance_scale(A)
    As = A / d[:, None] * d[None, :]
    Ws = W / np.outer(d, d)
    I = np.eye(n)
    K = np.kron(As, I) + np.kron(I, As)
    Xs = np.linalg.solve(K, -Ws.ravel()).reshape(n, n)
    return _sym(Xs * np.outer(d, d))
