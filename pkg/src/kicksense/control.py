"""LQR synthesis and LQG regulator assembly for the resonator model."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import block_diag

from .lti import discretize_input
from .model import K_B, StateSpaceModel
from .riccati import solve_care, solve_filter_care

logger = logging.getLogger(__name__)

DEFAULT_N_WEIGHT = 1e8
DEFAULT_T_EXEC = 200e-9


class ControlError(ArithmeticError):
    pass


@dataclass(frozen=True)
class RegulatorGains:
    """Steady LQG regulator ``dx_f = A_f x_f + K_f y``, ``u = -K_c x_f``.

    ``A_df`` and ``K_df`` are its discretization at ``T_exec``; they are
    ``None`` until :func:`discretize_regulator` has been applied.
    """

    K_c: np.ndarray
    K_f: np.ndarray
    A_f: np.ndarray
    A_df: np.ndarray | None = None
    K_df: np.ndarray | None = None
    T_exec: float | None = None

    def to_dict(self) -> dict:
        out = {"K_c": self.K_c.tolist(), "K_f": self.K_f.tolist(), "A_f": self.A_f.tolist()}
        if self.A_df is not None:
            out.update(A_df=self.A_df.tolist(), K_df=self.K_df.tolist(), T_exec=self.T_exec)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> RegulatorGains:
        arr = lambda key: None if data.get(key) is None else np.array(data[key], dtype=float)  # noqa: E731
        return cls(
            K_c=arr("K_c"),
            K_f=arr("K_f"),
            A_f=arr("A_f"),
            A_df=arr("A_df"),
            K_df=arr("K_df"),
            T_exec=data.get("T_exec"),
        )


def default_weights(model: StateSpaceModel, n_weight: float = DEFAULT_N_WEIGHT):
    """Energy-weighted state cost and scalar input cost.

    The state cost ``x^T M x`` equals twice the stored modal energy in units
    of ``k_B T``. Disturbance states carry no weight.
    """
    blocks = []
    for mode in model.modes:
        kT = K_B * (mode.T if mode.T > 0 else 300.0)
        blocks.append(np.diag([mode.k_eff, mode.m_eff]) / kT)
    n_rest = model.n_states - 2 * len(model.modes)
    M = block_diag(*blocks, np.zeros((n_rest, n_rest)))
    N = np.eye(model.B.shape[1]) * n_weight
    return M, N


def lqr_gain(model: StateSpaceModel, M, N) -> np.ndarray:
    """State-feedback gain ``K_c = N^-1 B^T V`` from the control Riccati equation."""
    N = np.atleast_2d(np.asarray(N, dtype=float))
    sol = solve_care(model.A, model.B, M, N)
    K_c = np.linalg.solve(N, model.B.T @ sol.X)
    if np.any(np.linalg.eigvals(model.A - model.B @ K_c).real >= 0):
        raise ControlError("LQR closed loop is not Hurwitz")
    return K_c


def kalman_bucy_gain(model: StateSpaceModel):
    """Steady Kalman-Bucy gain ``K_f = Sigma C^T R^-1`` and covariance ``Sigma``."""
    sol = solve_filter_care(model.A, model.G, model.C, model.R)
    K_f = sol.X @ model.C.T @ np.linalg.inv(model.R)
    return K_f, sol.X


def closed_loop_matrix(model: StateSpaceModel, K_c, K_f) -> np.ndarray:
    """Dynamics of the stacked plant and regulator state ``[x, x_f]``."""
    A, B, C = model.A, model.B, model.C
    A_f = A - K_f @ C - B @ K_c
    return np.block([[A, -B @ K_c], [K_f @ C, A_f]])


def assemble_lqg(model: StateSpaceModel, K_c, K_f) -> RegulatorGains:
    """Combine LQR and observer gains; rejects an unstable closed loop."""
    K_c = np.atleast_2d(np.asarray(K_c, dtype=float))
    K_f = np.asarray(K_f, dtype=float).reshape(model.n_states, -1)
    if K_c.shape != (model.B.shape[1], model.n_states) or K_f.shape[1] != model.C.shape[0]:
        raise ControlError("gain dimensions do not match the model")
    A_f = model.A - K_f @ model.C - model.B @ K_c
    ev = np.linalg.eigvals(closed_loop_matrix(model, K_c, K_f))
    if np.any(ev.real >= 0):
        raise ControlError(f"closed loop unstable, max Re(lambda) = {ev.real.max():.3g}")
    return RegulatorGains(K_c=K_c, K_f=K_f, A_f=A_f)


def discretize_regulator(gains: RegulatorGains, T_exec: float = DEFAULT_T_EXEC):
    """Return ``(A_df, K_df)`` for a regulator executed every ``T_exec`` seconds.

    ``K_df = A_f^-1 (A_df - I) K_f`` is evaluated through an augmented matrix
    exponential, which stays valid when ``A_f`` is singular.
    """
    if not T_exec > 0:
        raise ValueError("T_exec must be positive")
    A_df, K_df = discretize_input(gains.A_f, gains.K_f, T_exec)
    if np.max(np.abs(np.linalg.eigvals(A_df))) >= 1.0:
        logger.warning("discretized regulator is not Schur stable")
    return A_df, K_df


def design_lqg(
    model: StateSpaceModel, M=None, N=None, T_exec: float | None = DEFAULT_T_EXEC
) -> RegulatorGains:
    """LQR plus Kalman-Bucy regulator, discretized at ``T_exec`` when given."""
    if M is None or N is None:
        M0, N0 = default_weights(model)
        M = M0 if M is None else M
        N = N0 if N is None else N
    K_c = lqr_gain(model, M, N)
    K_f, _ = kalman_bucy_gain(model)
    gains = assemble_lqg(model, K_c, K_f)
    if T_exec is None:
        return gains
    A_df, K_df = discretize_regulator(gains, T_exec)
    return RegulatorGains(K_c=gains.K_c, K_f=gains.K_f, A_f=gains.A_f, A_df=A_df, K_df=K_df, T_exec=T_exec)
