"""Structural tests and exact zero-order-hold discretization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .model import StateSpaceModel


@dataclass(frozen=True)
class DiscreteModel:
    """Sampled-data model ``x[k+1] = A_d x[k] + B_d u[k] + w[k]``, ``y[k] = C x[k] + v[k]``.

    ``Q_d`` and ``R_d`` are the covariances of ``w[k]`` and ``v[k]``.
    """

    A_d: np.ndarray
    B_d: np.ndarray
    Q_d: np.ndarray
    R_d: np.ndarray
    C: np.ndarray
    T_s: float

    def __post_init__(self) -> None:
        if not self.T_s > 0:
            raise ValueError(f"sample time must be positive, got {self.T_s}")
        for arr in (self.A_d, self.B_d, self.Q_d, self.R_d, self.C):
            arr.setflags(write=False)

    @property
    def n_states(self) -> int:
        return self.A_d.shape[0]

    def to_dict(self) -> dict:
        return {
            "T_s": self.T_s,
            "A_d": self.A_d.tolist(),
            "B_d": self.B_d.tolist(),
            "Q_d": self.Q_d.tolist(),
            "R_d": self.R_d.tolist(),
            "C": self.C.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> DiscreteModel:
        return cls(
            A_d=np.array(data["A_d"], dtype=float),
            B_d=np.array(data["B_d"], dtype=float),
            Q_d=np.array(data["Q_d"], dtype=float),
            R_d=np.array(data["R_d"], dtype=float),
            C=np.array(data["C"], dtype=float),
            T_s=float(data["T_s"]),
        )


def _numerical_rank(M: np.ndarray, n: int) -> int:
    if M.size == 0:
        return 0
    s = np.linalg.svd(M, compute_uv=False)
    if s[0] == 0.0:
        return 0
    tol = n * np.finfo(float).eps * s[0]
    return int(np.sum(s > tol))


def _balance(A: np.ndarray) -> np.ndarray:
    # diagonal similarity scaling; keeps rank tests meaningful for the
    # resonator model whose entries span twenty orders of magnitude
    from scipy.linalg import matrix_balance

    _, (scale, _) = matrix_balance(A, permute=False, separate=True)
    return scale


def observability_matrix(A, C) -> np.ndarray:
    A = np.atleast_2d(A)
    C = np.atleast_2d(C)
    n = A.shape[0]
    blocks = [C]
    for _ in range(n - 1):
        blocks.append(blocks[-1] @ A)
    return np.vstack(blocks)


def controllability_matrix(A, B) -> np.ndarray:
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    n = A.shape[0]
    blocks = [B]
    for _ in range(n - 1):
        blocks.append(A @ blocks[-1])
    return np.hstack(blocks)


def _normalized_krylov(A, X, transpose: bool) -> np.ndarray:
    # Krylov blocks are normalized column-wise so that powers of a matrix
    # with |lambda| ~ 1e5 do not swamp the tolerance of the SVD.
    n = A.shape[0]
    blocks = [X / max(np.linalg.norm(X), np.finfo(float).tiny)]
    for _ in range(n - 1):
        nxt = blocks[-1] @ A if transpose else A @ blocks[-1]
        norm = np.linalg.norm(nxt)
        blocks.append(nxt / norm if norm > 0 else nxt)
    return np.vstack(blocks) if transpose else np.hstack(blocks)


def observability_rank(A, C) -> tuple[int, bool]:
    """Numerical rank of the observability matrix ``[C; CA; ...; CA^(n-1)]``.

    The system is diagonally balanced first and every Krylov block is
    normalized; neither changes the rank in exact arithmetic.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    n = A.shape[0]
    d = _balance(A)
    Ab = A * d[None, :] / d[:, None]
    Cb = C * d[None, :]
    rank = _numerical_rank(_normalized_krylov(Ab, Cb, transpose=True), n)
    return rank, rank == n


def controllability_rank(A, B) -> tuple[int, bool]:
    """Numerical rank of the controllability matrix ``[B, AB, ..., A^(n-1)B]``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    n = A.shape[0]
    if not np.any(B):
        return 0, False
    d = _balance(A)
    Ab = A * d[None, :] / d[:, None]
    Bb = B / d[:, None]
    rank = _numerical_rank(_normalized_krylov(Ab, Bb, transpose=False), n)
    return rank, rank == n


def is_stabilizable(A, B) -> bool:
    """PBH test on every eigenvalue with non-negative real part."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    n = A.shape[0]
    for lam in np.linalg.eigvals(A):
        if lam.real < 0:
            continue
        M = np.hstack([A - lam * np.eye(n), B])
        if _numerical_rank(M, n) < n:
            return False
    return True


def discretize_input(A: np.ndarray, B: np.ndarray, T_s: float) -> tuple[np.ndarray, np.ndarray]:
    """``(exp(A T), int_0^T exp(A s) ds B)`` from one augmented exponential."""
    n = A.shape[0]
    l = B.shape[1]
    M = np.zeros((n + l, n + l))
    M[:n, :n] = A
    M[:n, n:] = B
    E = expm(M * T_s)
    return E[:n, :n], E[:n, n:]


def process_noise_covariance(A: np.ndarray, G: np.ndarray, T_s: float) -> np.ndarray:
    """Van Loan evaluation of ``int_0^T exp(A t) G G^T exp(A^T t) dt``."""
    n = A.shape[0]
    M = np.zeros((2 * n, 2 * n))
    M[:n, :n] = -A
    M[:n, n:] = G @ G.T
    M[n:, n:] = A.T
    E = expm(M * T_s)
    Phi_T = E[n:, n:]
    Q = Phi_T.T @ E[:n, n:]
    return 0.5 * (Q + Q.T)


def discretize(model: StateSpaceModel, T_s: float) -> DiscreteModel:
    """Exact zero-order-hold discretization of ``model`` with sample time ``T_s``."""
    if not T_s > 0:
        raise ValueError(f"sample time must be positive, got {T_s}")
    A_d, B_d = discretize_input(model.A, model.B, T_s)
    Q_d = process_noise_covariance(model.A, model.G, T_s)
    R_d = np.asarray(model.R, dtype=float) / T_s
    return DiscreteModel(A_d=A_d, B_d=B_d, Q_d=Q_d, R_d=R_d, C=np.array(model.C, dtype=float), T_s=T_s)
