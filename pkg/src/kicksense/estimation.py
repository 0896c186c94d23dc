"""Discrete-time Kalman filtering and Rauch-Tung-Striebel smoothing.

The filter is the one-step predictor: the belief stored at index ``k`` is
conditioned on measurements ``y[0..k-1]``. The smoother rebuilds the
measurement-updated estimate at each step from the stored predictor quantities
and runs the RTS recursion backward from the last belief.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .lti import DiscreteModel
from .riccati import RiccatiError, dare_filter_fixed_point


class EstimationError(ArithmeticError):
    pass


@dataclass(frozen=True)
class GaussianBelief:
    t: float
    x: np.ndarray
    Sigma: np.ndarray

    def __post_init__(self) -> None:
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.Sigma))):
            raise EstimationError("belief has non-finite entries")


@dataclass(frozen=True)
class Trace:
    """Recorded measurements ``y`` and inputs ``u`` sampled every ``T_s`` seconds.

    ``y`` has shape (N, m_y) and ``u`` shape (N, l); 1-D inputs are promoted.
    """

    T_s: float
    y: np.ndarray
    u: np.ndarray

    def __post_init__(self) -> None:
        if not self.T_s > 0:
            raise ValueError("T_s must be positive")
        y = np.asarray(self.y, dtype=float)
        u = np.asarray(self.u, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        if u.ndim == 1:
            u = u[:, None]
        if len(y) != len(u):
            raise ValueError(f"y and u must have equal length, got {len(y)} and {len(u)}")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "u", u)

    def __len__(self) -> int:
        return len(self.y)

    @property
    def t(self) -> np.ndarray:
        return np.arange(len(self)) * self.T_s

    def segment(self, start: int, stop: int | None = None) -> Trace:
        return Trace(self.T_s, self.y[start:stop], self.u[start:stop])

    def to_csv(self, path, header_comment: str | None = None) -> None:
        with Path(path).open("w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "y", "u"])
            for t, y, u in zip(self.t, self.y[:, 0], self.u[:, 0]):
                w.writerow([repr(float(t)), repr(float(y)), repr(float(u))])

    @classmethod
    def from_csv(cls, path) -> Trace:
        with Path(path).open(newline="") as fh:
            rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
        header, body = rows[0], rows[1:]
        if header[:3] != ["t", "y", "u"]:
            raise ValueError(f"{path}: expected header t,y,u, got {header}")
        data = np.array(body, dtype=float)
        if len(data) < 2:
            raise ValueError(f"{path}: need at least two samples to infer T_s")
        T_s = float(np.median(np.diff(data[:, 0])))
        return cls(T_s, data[:, 1], data[:, 2])


@dataclass(frozen=True)
class FilterResult:
    """Output of :func:`kf_run`.

    ``x[k]`` and ``Sigma[j]`` are predictor means and covariances; with
    ``cov_stride > 1`` only every ``cov_stride``-th covariance is kept
    (``Sigma[j]`` belongs to index ``j * cov_stride``).
    """

    T_s: float
    x: np.ndarray
    Sigma: np.ndarray
    innovations: np.ndarray
    innovation_cov: np.ndarray
    Sigma_final: np.ndarray
    cov_stride: int = 1
    t0: float = 0.0
    joseph: bool = False

    @property
    def n_samples(self) -> int:
        return len(self.innovations)

    def belief(self, k: int) -> GaussianBelief:
        if k < 0:
            k += self.n_samples + 1
        if k == self.n_samples:
            Sigma = self.Sigma_final
        elif k % self.cov_stride == 0:
            Sigma = self.Sigma[k // self.cov_stride]
        else:
            raise IndexError(f"covariance at {k} not stored (stride {self.cov_stride})")
        return GaussianBelief(self.t0 + k * self.T_s, self.x[k], Sigma)

    @property
    def beliefs(self) -> list[GaussianBelief]:
        step = self.cov_stride
        return [self.belief(k) for k in range(0, self.n_samples + 1) if k % step == 0 or k == self.n_samples]


@dataclass(frozen=True)
class SmootherResult:
    T_s: float
    x: np.ndarray
    Sigma: np.ndarray
    jitter_applied: bool = False
    t0: float = 0.0

    def belief(self, k: int) -> GaussianBelief:
        if k < 0:
            k += len(self.x)
        return GaussianBelief(self.t0 + k * self.T_s, self.x[k], self.Sigma[k])


def kf_step(belief: GaussianBelief, y_k, u_k, model: DiscreteModel, joseph: bool = False):
    """One predictor step; returns ``(next_belief, innovation)``.

    ``joseph`` selects the Joseph-form covariance update, which stays
    positive semidefinite when ``R_d`` is tiny relative to the prior.
    """
    y_k = np.atleast_1d(np.asarray(y_k, dtype=float))
    u_k = np.atleast_1d(np.asarray(u_k, dtype=float))
    innovation = y_k - model.C @ belief.x
    P_next, K, S = _kernels.cov_step(
        model.A_d, model.C, model.Q_d, model.R_d, np.ascontiguousarray(belief.Sigma), bool(joseph)
    )
    if not np.all(np.linalg.eigvalsh(S) > 0):
        raise EstimationError("singular innovation covariance")
    x_next = model.A_d @ belief.x + model.B_d @ u_k + K @ innovation
    return GaussianBelief(belief.t + model.T_s, x_next, P_next), innovation


def kf_run(
    trace: Trace, model: DiscreteModel, belief0: GaussianBelief, cov_stride: int = 1, joseph: bool = False
) -> FilterResult:
    """Run the predictor over the whole trace, keeping every belief.

    See :func:`kf_step` for ``joseph``.
    """
    if cov_stride < 1:
        raise ValueError("cov_stride must be >= 1")
    if abs(trace.T_s - model.T_s) > 1e-9 * model.T_s:
        raise ValueError(f"trace sample time {trace.T_s} differs from model {model.T_s}")
    x0 = np.asarray(belief0.x, dtype=float)
    P0 = np.ascontiguousarray(belief0.Sigma, dtype=float)
    if np.min(np.linalg.eigvalsh(model.R_d)) <= 0:
        raise EstimationError("R_d must be positive definite")
    xs, Ps, innov, S, P_final = _kernels.filter_run(
        np.ascontiguousarray(model.A_d),
        np.ascontiguousarray(model.B_d),
        np.ascontiguousarray(model.C),
        np.ascontiguousarray(model.Q_d),
        np.ascontiguousarray(model.R_d),
        x0,
        P0,
        np.ascontiguousarray(trace.y),
        np.ascontiguousarray(trace.u),
        int(cov_stride),
        bool(joseph),
    )
    if not np.all(np.isfinite(P_final)):
        raise EstimationError("filter covariance became singular or non-finite")
    return FilterResult(
        T_s=model.T_s,
        x=xs,
        Sigma=Ps,
        innovations=innov,
        innovation_cov=S,
        Sigma_final=P_final,
        cov_stride=int(cov_stride),
        t0=belief0.t,
        joseph=bool(joseph),
    )


def posterior(forward: FilterResult, model: DiscreteModel, k: int) -> GaussianBelief:
    """Measurement-updated belief at sample ``k`` (conditioned on ``y[0..k]``)."""
    b = forward.belief(k)
    PCt = b.Sigma @ model.C.T
    S = model.C @ PCt + model.R_d
    W = np.linalg.solve(S, PCt.T).T
    Sigma = b.Sigma - W @ PCt.T
    return GaussianBelief(b.t, b.x + W @ forward.innovations[k], 0.5 * (Sigma + Sigma.T))


def rts_run(forward: FilterResult, model: DiscreteModel, *, keep_covariances: bool = True) -> SmootherResult:
    """Fixed-interval RTS smoother over a completed forward pass.

    Returns ``N + 1`` smoothed beliefs; the last equals the last forward
    belief. Covariances dropped by a strided forward pass are recomputed block
    by block from the stored checkpoints.
    """
    N = forward.n_samples
    n = model.n_states
    A = np.ascontiguousarray(model.A_d)
    C = np.ascontiguousarray(model.C)
    Q = np.ascontiguousarray(model.Q_d)
    R = np.ascontiguousarray(model.R_d)
    out_x = np.empty((N + 1, n))
    out_x[N] = forward.x[N]
    P_next = np.ascontiguousarray(forward.Sigma_final)
    if keep_covariances:
        out_P = np.empty((N + 1, n, n))
        out_P[N] = P_next
    jitter = np.zeros(1, dtype=np.int64)
    stride = forward.cov_stride

    hi = N
    while hi > 0:
        if stride == 1:
            lo = 0
            block_P = forward.Sigma
        else:
            lo = ((hi - 1) // stride) * stride
            block_P = _kernels.covariance_run(
                A, C, Q, R, np.ascontiguousarray(forward.Sigma[lo // stride]), hi - lo, forward.joseph
            )
            if hi == N:
                block_P[-1] = forward.Sigma_final
        if keep_covariances:
            buf, off = out_P, 0
        else:
            buf, off = np.empty((hi - lo + 1, n, n)), lo
        status, k_bad = _kernels.smoother_block(
            A, C, R, forward.x, block_P, forward.innovations,
            out_x[hi].copy(), P_next, lo, hi, out_x, buf, off, jitter,
        )
        if status != _kernels.OK:
            raise EstimationError(f"singular predicted covariance in backward pass at sample {k_bad}")
        P_next = buf[lo - off].copy()
        hi = lo
    if not keep_covariances:
        out_P = P_next[None]
    return SmootherResult(T_s=forward.T_s, x=out_x, Sigma=out_P, jitter_applied=bool(jitter[0]), t0=forward.t0)


def steady_state_gains(model: DiscreteModel, **kwargs):
    """Steady predictor gain and covariance from the filter Riccati fixed point."""
    sol = dare_filter_fixed_point(model.A_d, model.C, model.Q_d, model.R_d, **kwargs)
    Sigma = sol.X
    S = model.C @ Sigma @ model.C.T + model.R_d
    K = np.linalg.solve(S.T, (model.A_d @ Sigma @ model.C.T).T).T
    return K, Sigma


def steady_innovations(trace: Trace, model: DiscreteModel, K=None, x0=None) -> np.ndarray:
    """Innovations of the fixed-gain predictor; cheap for very long traces."""
    if K is None:
        K, _ = steady_state_gains(model)
    n = model.n_states
    x0 = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float)
    innov, _ = _kernels.steady_filter_run(
        np.ascontiguousarray(model.A_d),
        np.ascontiguousarray(model.B_d),
        np.ascontiguousarray(model.C),
        np.ascontiguousarray(K),
        x0,
        np.ascontiguousarray(trace.y),
        np.ascontiguousarray(trace.u),
    )
    return innov


def write_beliefs_csv(path, t, x, Sigma, header_comment: str | None = None) -> None:
    """Belief export: ``t, x1..xn, sigma11, sigma12, ...`` (upper triangle)."""
    n = x.shape[1]
    iu = np.triu_indices(n)
    with Path(path).open("w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"x{i + 1}" for i in range(n)] + [f"sigma{i + 1}{j + 1}" for i, j in zip(*iu)])
        for k in range(len(t)):
            w.writerow([repr(float(t[k]))] + [repr(float(v)) for v in x[k]] + [repr(float(v)) for v in Sigma[k][iu]])


__all__ = [
    "EstimationError",
    "FilterResult",
    "GaussianBelief",
    "RiccatiError",
    "SmootherResult",
    "Trace",
    "kf_run",
    "kf_step",
    "posterior",
    "rts_run",
    "steady_innovations",
    "steady_state_gains",
    "write_beliefs_csv",
]
