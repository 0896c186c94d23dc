"""Reconstruction of an impulsive momentum kick at a known sample.

The trace is split at the kick sample ``t_p``. The predictor run over the data
before the kick gives the pre-kick state; its belief, with inflated velocity
variances, seeds a filter over the data after the kick whose RTS-smoothed
estimate at ``t_p`` gives the post-kick state. The difference of the two is
the estimated discontinuity.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from . import _kernels
from .estimation import GaussianBelief, Trace, kf_run, rts_run
from .lti import DiscreteModel, discretize
from .model import StateSpaceModel
from .riccati import dare_filter_fixed_point, discrete_lyapunov

DEFAULT_PRIOR_FACTOR = 1e6
STATIONARITY_RTOL = 1e-6


class KickError(ValueError):
    pass


class NonStationarySegmentWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class KickPrior:
    """Prior variance of the velocity jump of each mechanical mode [(m/s)^2]."""

    sigma2: tuple[float, ...]

    def __post_init__(self) -> None:
        if any(s < 0 or not math.isfinite(s) for s in self.sigma2):
            raise KickError("prior velocity variances must be finite and non-negative")


@dataclass(frozen=True)
class KickEstimate:
    t_p: float
    index: int
    dx: np.ndarray
    Sigma_bound: np.ndarray
    momenta: np.ndarray
    Sigma_before: np.ndarray
    Sigma_after: np.ndarray
    x_before: np.ndarray
    x_after: np.ndarray
    stationary: bool = True
    notes: tuple[str, ...] = field(default=())

    def dv(self, mode: int = 0) -> float:
        return float(self.dx[2 * mode + 1])

    def dz(self, mode: int = 0) -> float:
        return float(self.dx[2 * mode])

    def bound_dv(self, mode: int = 0) -> float:
        """Standard-deviation bound on the velocity jump of ``mode``."""
        i = 2 * mode + 1
        return float(math.sqrt(self.Sigma_bound[i, i]))


def _velocity_indices(model: StateSpaceModel) -> list[int]:
    return [model.velocity_index(i) for i in range(len(model.modes))]


def default_prior(model: StateSpaceModel, discrete: DiscreteModel, factor: float = DEFAULT_PRIOR_FACTOR) -> KickPrior:
    """``factor`` times the stationary predictor variance of each modal velocity.

    Only the order of magnitude matters here, so the Riccati fixed point is
    iterated to a loose tolerance.
    """
    if not factor > 0:
        raise KickError("prior factor must be positive")
    Sigma = dare_filter_fixed_point(discrete.A_d, discrete.C, discrete.Q_d, discrete.R_d, rtol=1e-6).X
    return KickPrior(tuple(float(factor * Sigma[i, i]) for i in _velocity_indices(model)))


def inflate_covariance(belief: GaussianBelief, prior: KickPrior, model: StateSpaceModel) -> GaussianBelief:
    """Add the prior jump variances to the modal velocity diagonal entries only."""
    if len(prior.sigma2) != len(model.modes):
        raise KickError(f"prior has {len(prior.sigma2)} entries for {len(model.modes)} modes")
    Sigma = np.array(belief.Sigma, dtype=float, copy=True)
    for idx, s2 in zip(_velocity_indices(model), prior.sigma2):
        Sigma[idx, idx] += s2
    return GaussianBelief(belief.t, np.array(belief.x, copy=True), Sigma)


def kick_bound(Sigma_before, Sigma_after) -> np.ndarray:
    """Upper bound on the covariance of the estimated discontinuity."""
    S = np.asarray(Sigma_before, dtype=float) + np.asarray(Sigma_after, dtype=float)
    return 0.5 * (S + S.T)


def default_initial_belief(discrete: DiscreteModel, t: float = 0.0) -> GaussianBelief:
    """Zero mean with the open-loop stationary state covariance."""
    n = discrete.n_states
    return GaussianBelief(t, np.zeros(n), discrete_lyapunov(discrete.A_d, discrete.Q_d))


def _relative_step_change(P_prev, P_last) -> float:
    den = np.linalg.norm(P_last)
    return float(np.linalg.norm(P_last - P_prev) / den) if den > 0 else 0.0


def estimate_kick(
    trace: Trace,
    model: StateSpaceModel,
    t_p_index: int,
    prior: KickPrior | None = None,
    *,
    discrete: DiscreteModel | None = None,
    belief0: GaussianBelief | None = None,
) -> KickEstimate:
    """Estimate the state discontinuity at sample ``t_p_index``.

    The returned ``dx`` is the post-kick minus the pre-kick estimate, so a
    kick that raises a modal velocity yields a positive ``dv``.
    """
    N = len(trace)
    if not 0 < t_p_index < N:
        raise KickError(f"kick index must satisfy 0 < t_p < {N}, got {t_p_index}")
    if discrete is None:
        discrete = discretize(model, trace.T_s)
    if prior is None:
        prior = default_prior(model, discrete)
    if belief0 is None:
        belief0 = default_initial_belief(discrete)

    notes = []
    before = kf_run(trace.segment(0, t_p_index), discrete, belief0)
    b1 = before.belief(t_p_index)
    if t_p_index >= 2 and _relative_step_change(before.Sigma[t_p_index - 1], b1.Sigma) > STATIONARITY_RTOL:
        notes.append("pre-kick segment too short for a stationary covariance")

    seed = inflate_covariance(b1, prior, model)
    after = kf_run(trace.segment(t_p_index), discrete, seed)
    n2 = after.n_samples
    if n2 >= 2 and _relative_step_change(after.Sigma[n2 - 1], after.Sigma_final) > STATIONARITY_RTOL:
        notes.append("post-kick segment too short for a stationary covariance")
    smoothed = rts_run(after, discrete, keep_covariances=False)
    x2 = smoothed.x[0]
    S2 = smoothed.Sigma[0]

    dx = x2 - b1.x
    momenta = np.array([m.m_eff * dx[model.velocity_index(i)] for i, m in enumerate(model.modes)])
    stationary = not notes
    if not stationary:
        warnings.warn("; ".join(notes), NonStationarySegmentWarning, stacklevel=2)
    return KickEstimate(
        t_p=t_p_index * trace.T_s,
        index=t_p_index,
        dx=dx,
        Sigma_bound=kick_bound(b1.Sigma, S2),
        momenta=momenta,
        Sigma_before=b1.Sigma,
        Sigma_after=S2,
        x_before=b1.x,
        x_after=x2,
        stationary=stationary,
        notes=tuple(notes),
    )


def covariance_bound(
    model: StateSpaceModel,
    discrete: DiscreteModel,
    n_before: int,
    n_after: int,
    prior: KickPrior,
    Sigma0=None,
) -> np.ndarray:
    """Data-independent bound produced by :func:`estimate_kick` for given segment lengths."""
    A = np.ascontiguousarray(discrete.A_d)
    C = np.ascontiguousarray(discrete.C)
    Q = np.ascontiguousarray(discrete.Q_d)
    R = np.ascontiguousarray(discrete.R_d)
    if Sigma0 is None:
        Sigma0 = default_initial_belief(discrete).Sigma
    P1 = _kernels.covariance_run(A, C, Q, R, np.ascontiguousarray(Sigma0), n_before)[-1]
    seed = inflate_covariance(GaussianBelief(0.0, np.zeros(discrete.n_states), P1), prior, model)
    m = C.shape[0]
    zero_trace = Trace(discrete.T_s, np.zeros((n_after, m)), np.zeros((n_after, discrete.B_d.shape[1])))
    after = kf_run(zero_trace, discrete, seed)
    S2 = rts_run(after, discrete, keep_covariances=False).Sigma[0]
    return kick_bound(P1, S2)


def calibrate_measurement_noise(
    model: StateSpaceModel,
    T_s: float,
    target_dv_std: float,
    n_before: int,
    n_after: int,
    mode: int = 0,
    prior_factor: float = DEFAULT_PRIOR_FACTOR,
    bracket: tuple[float, float] = (1e-20, 1e-8),
) -> StateSpaceModel:
    """Model copy whose measurement noise makes the velocity bound of ``mode`` hit the target.

    Searches the one-sided measurement-noise PSD on a log scale. The result is
    a calibration of this model, not a statement about any real detector.
    """
    idx = model.velocity_index(mode)

    def excess(log_psd: float) -> float:
        m = model.with_measurement_noise([[10.0**log_psd / 2.0]])
        d = discretize(m, T_s)
        prior = default_prior(m, d, prior_factor)
        B = covariance_bound(m, d, n_before, n_after, prior)
        return math.log(math.sqrt(B[idx, idx]) / target_dv_std)

    lo, hi = (math.log10(b) for b in bracket)
    f_lo, f_hi = excess(lo), excess(hi)
    if f_lo > 0 or f_hi < 0:
        raise KickError(
            f"target {target_dv_std:g} m/s not reachable in PSD bracket {bracket} "
            f"(bound spans {target_dv_std * math.exp(f_lo):.3g}..{target_dv_std * math.exp(f_hi):.3g})"
        )
    log_psd = brentq(excess, lo, hi, xtol=1e-6)
    return model.with_measurement_noise([[10.0**log_psd / 2.0]])


ENSEMBLE_HEADER = ["trial", "p_applied", "p_est_mode1", "dv1_est", "dz1_est", "bound_dv1"]


def write_ensemble_csv(path, rows, header_comment: str | None = None) -> None:
    """Rows are ``(trial, p_applied, KickEstimate)``."""
    with Path(path).open("w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ENSEMBLE_HEADER)
        for trial, p_applied, est in rows:
            w.writerow(
                [trial, repr(float(p_applied)), repr(float(est.momenta[0])), repr(est.dv(0)), repr(est.dz(0)), repr(est.bound_dv(0))]
            )
