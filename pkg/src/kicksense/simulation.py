"""Stochastic simulation of the resonator, open loop or under the LQG regulator.

In closed loop the plant and regulator advance together every ``T_exec``
seconds (``T_s`` must be an integer multiple of it). The recorded trace is
sampled every ``T_s``: ``y_k`` is the position-free output ``C x_k`` plus the
average of the fine-step measurement noise over the sample, so its noise
variance is exactly ``R / T_s``; ``u_k`` is the average input applied over the
sample.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .control import RegulatorGains
from .estimation import Trace
from .kick import KickEstimate, KickPrior, estimate_kick
from .lti import DiscreteModel, discretize
from .model import StateSpaceModel
from .riccati import continuous_lyapunov, discrete_lyapunov

logger = logging.getLogger(__name__)

CHUNK = 1 << 16


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class Kick:
    """Momentum ``p`` [kg m/s] delivered at sample ``index``, split over modes by ``weights``."""

    index: int
    momentum: float
    weights: tuple[float, ...] = (1.0,)


@dataclass(frozen=True)
class SimConfig:
    model: StateSpaceModel
    T_s: float
    N: int
    seed: int = 0
    gains: RegulatorGains | None = None
    kicks: tuple[Kick, ...] = ()
    x0: str | np.ndarray = "stationary"
    trial: int | None = None

    def __post_init__(self) -> None:
        if not self.T_s > 0:
            raise SimulationError("T_s must be positive")
        if self.N < 1:
            raise SimulationError("N must be at least 1")
        for k in self.kicks:
            if not 0 <= k.index < self.N:
                raise SimulationError(f"kick index {k.index} outside [0, {self.N})")
            if len(k.weights) > len(self.model.modes):
                raise SimulationError("kick has more weights than the model has modes")
        if self.gains is not None and self.gains.A_df is None:
            raise SimulationError("regulator gains must be discretized (A_df, K_df) for simulation")


@dataclass(frozen=True)
class SimResult:
    trace: Trace
    x: np.ndarray
    kicks: tuple[Kick, ...] = ()
    seed: int = 0
    trial: int | None = None
    regulator_state: np.ndarray | None = field(default=None, repr=False)

    def write_states_csv(self, path, labels, header_comment: str | None = None) -> None:
        with Path(path).open("w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", *labels])
            for t, row in zip(self.trace.t, self.x):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in row])


def psd_factor(P) -> np.ndarray:
    """Factor ``L`` with ``L L^T = P`` for a symmetric PSD matrix.

    Uses a Jacobi-scaled eigendecomposition; tiny negative eigenvalues from
    rounding are clipped and only columns with positive eigenvalue are kept.
    """
    P = 0.5 * (np.asarray(P, dtype=float) + np.asarray(P, dtype=float).T)
    d = np.sqrt(np.clip(np.diag(P), 0.0, None))
    pos = d > 0
    n = P.shape[0]
    if not pos.any():
        return np.zeros((n, 0))
    Ps = P[np.ix_(pos, pos)] / np.outer(d[pos], d[pos])
    w, V = np.linalg.eigh(Ps)
    keep = w > w.max() * 1e-13
    Ls = V[:, keep] * np.sqrt(w[keep])
    L = np.zeros((n, int(keep.sum())))
    L[pos] = Ls * d[pos, None]
    return L


def _kick_vectors(model: StateSpaceModel, kicks) -> tuple[np.ndarray, np.ndarray]:
    kicks = sorted(kicks, key=lambda k: k.index)
    idx = np.array([k.index for k in kicks], dtype=np.int64)
    dx = np.zeros((len(kicks), model.n_states))
    for j, k in enumerate(kicks):
        for i, w in enumerate(k.weights):
            dx[j, model.velocity_index(i)] += w * k.momentum / model.modes[i].m_eff
    return idx, dx


def trial_rng(seed: int, trial: int | None = None) -> np.random.Generator:
    """Independent generator per ``(seed, trial)``; ``trial=None`` is the root stream."""
    key = () if trial is None else (int(trial),)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


def substeps(T_s: float, T_exec: float) -> int:
    ratio = T_s / T_exec
    n_sub = int(round(ratio))
    if n_sub < 1 or abs(ratio - n_sub) > 1e-9 * ratio:
        raise SimulationError(f"T_s = {T_s} is not an integer multiple of T_exec = {T_exec}")
    return n_sub


def closed_loop_fine_matrices(model: StateSpaceModel, gains: RegulatorGains):
    """Fine-step plant discretization and stacked ``[x, x_f]`` dynamics and noise."""
    h = gains.T_exec
    fine = discretize(model, h)
    R_h = np.atleast_2d(model.R) / h
    F = np.block([[fine.A_d, -fine.B_d @ gains.K_c], [gains.K_df @ model.C, gains.A_df]])
    W = np.block(
        [
            [fine.Q_d, np.zeros((model.n_states, model.n_states))],
            [np.zeros((model.n_states, model.n_states)), gains.K_df @ R_h @ gains.K_df.T],
        ]
    )
    return fine, R_h, F, W


def _initial_open(cfg: SimConfig, disc: DiscreteModel, rng) -> np.ndarray:
    n = disc.n_states
    if isinstance(cfg.x0, str):
        if cfg.x0 == "zero":
            return np.zeros(n)
        if cfg.x0 == "stationary":
            L = psd_factor(discrete_lyapunov(disc.A_d, disc.Q_d))
            return L @ rng.standard_normal(L.shape[1])
        raise SimulationError(f"unknown initial state '{cfg.x0}'")
    x0 = np.asarray(cfg.x0, dtype=float)
    if x0.shape != (n,):
        raise SimulationError(f"x0 must have length {n}")
    return x0


def simulate(cfg: SimConfig) -> SimResult:
    """Simulate ``cfg.N`` samples; deterministic for a given ``(seed, trial)``."""
    model = cfg.model
    rng = trial_rng(cfg.seed, cfg.trial)
    kick_idx, kick_dx = _kick_vectors(model, cfg.kicks)
    n, m = model.n_states, model.C.shape[0]
    C = np.ascontiguousarray(model.C)

    if cfg.gains is None:
        disc = discretize(model, cfg.T_s)
        Lq = np.ascontiguousarray(psd_factor(disc.Q_d))
        Lr = np.ascontiguousarray(psd_factor(disc.R_d))
        x = _initial_open(cfg, disc, rng)
        xs = np.empty((cfg.N, n))
        ys = np.empty((cfg.N, m))
        u = np.zeros((CHUNK, disc.B_d.shape[1]))
        for start in range(0, cfg.N, CHUNK):
            stop = min(start + CHUNK, cfg.N)
            sel = (kick_idx >= start) & (kick_idx < stop)
            w = rng.standard_normal((stop - start, Lq.shape[1]))
            v = rng.standard_normal((stop - start, Lr.shape[1]))
            xs[start:stop], ys[start:stop], x = _kernels.simulate_open(
                disc.A_d, disc.B_d, C, Lq, Lr, x, u[: stop - start], w, v,
                kick_idx[sel] - start, kick_dx[sel],
            )
        trace = Trace(cfg.T_s, ys, np.zeros((cfg.N, disc.B_d.shape[1])))
        return SimResult(trace=trace, x=xs, kicks=cfg.kicks, seed=cfg.seed, trial=cfg.trial)

    gains = cfg.gains
    n_sub = substeps(cfg.T_s, gains.T_exec)
    fine, R_h, F, W = closed_loop_fine_matrices(model, gains)
    Lq = np.ascontiguousarray(psd_factor(fine.Q_d))
    Lr = np.ascontiguousarray(psd_factor(R_h))
    if isinstance(cfg.x0, str) and cfg.x0 == "stationary":
        L = psd_factor(discrete_lyapunov(F, W))
        z = L @ rng.standard_normal(L.shape[1])
        x, xr = z[:n], z[n:]
    else:
        x = _initial_open(cfg, fine, rng)
        xr = np.zeros(n)
    l = gains.K_c.shape[0]
    xs = np.empty((cfg.N, n))
    ys = np.empty((cfg.N, m))
    us = np.empty((cfg.N, l))
    for start in range(0, cfg.N, CHUNK):
        stop = min(start + CHUNK, cfg.N)
        sel = (kick_idx >= start) & (kick_idx < stop)
        cnt = (stop - start) * n_sub
        w = rng.standard_normal((cnt, Lq.shape[1]))
        v = rng.standard_normal((cnt, Lr.shape[1]))
        xs[start:stop], ys[start:stop], us[start:stop], x, xr = _kernels.simulate_closed(
            fine.A_d, fine.B_d, C, Lq, Lr,
            np.ascontiguousarray(gains.A_df), np.ascontiguousarray(gains.K_df), np.ascontiguousarray(gains.K_c),
            x, xr, n_sub, w, v, kick_idx[sel] - start, kick_dx[sel],
        )
    trace = Trace(cfg.T_s, ys, us)
    return SimResult(trace=trace, x=xs, kicks=cfg.kicks, seed=cfg.seed, trial=cfg.trial, regulator_state=xr)


@dataclass(frozen=True)
class TrialOutcome:
    trial: int
    momentum: float
    dv_true: float
    estimate: KickEstimate


def _run_trial(args) -> TrialOutcome:
    (model, gains, T_s, n_before, n_after, seed, trial, p, weights, prior, disc) = args
    cfg = SimConfig(
        model=model, T_s=T_s, N=n_before + n_after, seed=seed, gains=gains,
        kicks=(Kick(n_before, p, weights),), trial=trial,
    )
    sim = simulate(cfg)
    est = estimate_kick(sim.trace, model, n_before, prior, discrete=disc)
    dv_true = weights[0] * p / model.modes[0].m_eff
    return TrialOutcome(trial=trial, momentum=p, dv_true=dv_true, estimate=est)


def run_montecarlo(
    model: StateSpaceModel,
    magnitudes,
    trials: int,
    *,
    T_s: float,
    n_before: int,
    n_after: int,
    seed: int = 0,
    gains: RegulatorGains | None = None,
    prior: KickPrior | None = None,
    weights: tuple[float, ...] = (1.0,),
    workers: int = 1,
) -> list[TrialOutcome]:
    """Simulate and reconstruct ``trials`` kicks for every momentum in ``magnitudes``.

    Trial ``j`` of magnitude ``i`` uses the random stream ``(seed, i * trials + j)``,
    so results do not depend on ``workers``.
    """
    if trials < 1:
        raise SimulationError("trials must be at least 1")
    from .kick import default_prior

    disc = discretize(model, T_s)
    if prior is None:
        prior = default_prior(model, disc)
    jobs = [
        (model, gains, T_s, n_before, n_after, seed, i * trials + j, float(p), tuple(weights), prior, disc)
        for i, p in enumerate(magnitudes)
        for j in range(trials)
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_trial, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    return [_run_trial(job) for job in jobs]


def stationary_output_variance(model: StateSpaceModel, gains: RegulatorGains | None = None) -> float:
    """Output variance ``C P C^T`` of the stationary state, without measurement noise.

    In closed loop this is the fine-step stationary covariance of the plant
    part of the stacked plant and regulator state.
    """
    if gains is None:
        P = continuous_lyapunov(model.A, model.G @ model.G.T)
        return float((model.C @ P @ model.C.T)[0, 0])
    _, _, F, W = closed_loop_fine_matrices(model, gains)
    P = discrete_lyapunov(F, W)[: model.n_states, : model.n_states]
    return float((model.C @ P @ model.C.T)[0, 0])


__all__ = [
    "Kick",
    "SimConfig",
    "SimResult",
    "SimulationError",
    "TrialOutcome",
    "closed_loop_fine_matrices",
    "psd_factor",
    "run_montecarlo",
    "simulate",
    "substeps",
    "stationary_output_variance",
    "trial_rng",
]
