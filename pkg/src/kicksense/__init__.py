"""Optimal estimation of momentum kicks on a feedback-controlled multimode resonator."""

from .control import RegulatorGains, design_lqg, discretize_regulator, kalman_bucy_gain, lqr_gain
from .estimation import GaussianBelief, Trace, kf_run, rts_run, steady_state_gains
from .kick import KickEstimate, KickPrior, estimate_kick, inflate_covariance, kick_bound
from .lti import DiscreteModel, discretize, is_stabilizable
from .model import DisturbanceParams, ModeParams, StateSpaceModel, build_full_model
from .riccati import dare_filter_fixed_point, solve_care
from .simulation import Kick, SimConfig, run_montecarlo, simulate
from .spectral import ensemble_stats, welch_psd, whiteness_test

__version__ = "0.1.0"

__all__ = [
    "DiscreteModel",
    "DisturbanceParams",
    "GaussianBelief",
    "Kick",
    "KickEstimate",
    "KickPrior",
    "ModeParams",
    "RegulatorGains",
    "SimConfig",
    "StateSpaceModel",
    "Trace",
    "build_full_model",
    "dare_filter_fixed_point",
    "design_lqg",
    "discretize",
    "discretize_regulator",
    "ensemble_stats",
    "estimate_kick",
    "inflate_covariance",
    "is_stabilizable",
    "kalman_bucy_gain",
    "kf_run",
    "kick_bound",
    "lqr_gain",
    "rts_run",
    "run_montecarlo",
    "simulate",
    "solve_care",
    "steady_state_gains",
    "welch_psd",
    "whiteness_test",
]
