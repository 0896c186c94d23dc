"""Command-line entry point: ``kicksense {build,simulate,estimate,montecarlo}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config
from .control import (
    ControlError,
    RegulatorGains,
    assemble_lqg,
    closed_loop_matrix,
    default_weights,
    design_lqg,
    discretize_regulator,
)
from .estimation import EstimationError, Trace, steady_innovations, steady_state_gains
from .kick import KickError, KickPrior, default_prior, estimate_kick, write_ensemble_csv
from .lti import controllability_rank, discretize, is_stabilizable, observability_rank
from .riccati import RiccatiError
from .simulation import Kick, SimConfig, SimulationError, run_montecarlo, simulate
from .spectral import SpectralError, ensemble_stats, welch_psd, whiteness_test

logger = logging.getLogger("kicksense")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3

NUMERICAL_ERRORS = (RiccatiError, EstimationError, ControlError, np.linalg.LinAlgError, ArithmeticError)


def _regulator(cfg: ExperimentConfig, force: bool = False) -> RegulatorGains | None:
    if not (cfg.sim["feedback"] or force):
        return None
    ctl = cfg.control
    if ctl["gains_file"]:
        data = json.loads(Path(ctl["gains_file"]).read_text())
        gains = RegulatorGains.from_dict(data.get("gains", data))
        gains = assemble_lqg(cfg.model, gains.K_c, gains.K_f)
        A_df, K_df = discretize_regulator(gains, ctl["t_exec"])
        return RegulatorGains(gains.K_c, gains.K_f, gains.A_f, A_df, K_df, ctl["t_exec"])
    M, N = default_weights(cfg.model, ctl["n_weight"])
    if ctl["state_weights"] is not None:
        M = np.asarray(ctl["state_weights"], dtype=float)
    return design_lqg(cfg.model, M, N, T_exec=ctl["t_exec"])


def _prior(cfg: ExperimentConfig, disc) -> KickPrior:
    k = cfg.kick
    if k["prior_sigma2"] is not None:
        return KickPrior(tuple(float(s) for s in k["prior_sigma2"]))
    return default_prior(cfg.model, disc, k["prior_factor"])


def _write_json(path: Path, payload: dict, cfg: ExperimentConfig) -> None:
    payload = {"provenance": {"config_sha256": cfg.digest(), "seed": cfg.seed}, **payload}
    path.write_text(json.dumps(payload, indent=2))


def _whiteness(cfg: ExperimentConfig, trace: Trace, disc, stop: int | None = None):
    """Whiteness of the steady-gain innovations on ``trace[:stop]``.

    The start-up transient of the filter (five time constants of its slowest
    pole) is discarded.
    """
    an = cfg.analysis
    K, _ = steady_state_gains(disc)
    e = steady_innovations(trace.segment(0, stop), disc, K)[:, 0]
    rho = np.max(np.abs(np.linalg.eigvals(disc.A_d - K @ disc.C)))
    skip = min(int(np.ceil(5.0 / -np.log(rho))), len(e) // 2)
    return whiteness_test(
        e[skip:], f_s=1.0 / trace.T_s, band=tuple(an["whiteness_band_hz"]),
        lags=an["whiteness_lags"], segment_length=an["whiteness_segment"],
    )


def cmd_build(cfg: ExperimentConfig) -> dict:
    out = cfg.output
    out.mkdir(parents=True, exist_ok=True)
    model = cfg.model
    disc = discretize(model, cfg.sim["t_s"])
    obs_rank, obs = observability_rank(model.A, model.C)
    ctr_rank, ctr = controllability_rank(model.A, model.B)
    stab = is_stabilizable(model.A, model.B)
    per_mode = []
    for i, (lo, hi) in enumerate(model.blocks[: len(model.modes)]):
        r, full = controllability_rank(model.A[lo:hi, lo:hi], model.B[lo:hi])
        per_mode.append({"mode": i + 1, "controllability_rank": r, "controllable": full})
    report = {
        "n_states": model.n_states,
        "state_labels": list(model.state_labels),
        "observability_rank": obs_rank,
        "observable": obs,
        "controllability_rank": ctr_rank,
        "controllable": ctr,
        "stabilizable": stab,
        "modes": per_mode,
    }
    _write_json(
        out / "model.json",
        {
            "continuous": {k: getattr(model, k).tolist() for k in ("A", "B", "G", "C", "R")},
            "discrete": disc.to_dict(),
        },
        cfg,
    )
    gains = None
    if any(m.b_F for m in model.modes) or cfg.control["gains_file"]:
        gains = _regulator(cfg, force=True)
        ev = np.linalg.eigvals(closed_loop_matrix(model, gains.K_c, gains.K_f))
        report["closed_loop_eigenvalues"] = [[float(z.real), float(z.imag)] for z in sorted(ev, key=lambda z: z.real)]
        _write_json(out / "gains.json", {"gains": gains.to_dict()}, cfg)
    _write_json(out / "structure.json", report, cfg)
    lines = [
        f"# {cfg.provenance()}",
        f"states: {model.n_states} ({', '.join(model.state_labels)})",
        f"observable: {obs} (rank {obs_rank})",
        f"controllable: {ctr} (rank {ctr_rank})",
        f"stabilizable: {stab}",
    ]
    lines += [f"mode {p['mode']} controllable: {p['controllable']}" for p in per_mode]
    if gains is not None:
        lines.append(f"closed loop max Re(lambda): {max(e[0] for e in report['closed_loop_eigenvalues']):.6g} 1/s")
    (out / "build_report.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines[1:]))
    return report


def _schedule(cfg: ExperimentConfig):
    w = tuple(cfg.kick["weights"])
    return tuple(Kick(ev["index"], float(ev.get("momentum", 0.0)), w) for ev in cfg.kick["schedule"])


def cmd_simulate(cfg: ExperimentConfig):
    out = cfg.output
    out.mkdir(parents=True, exist_ok=True)
    gains = _regulator(cfg)
    sim = simulate(
        SimConfig(
            model=cfg.model, T_s=cfg.sim["t_s"], N=cfg.sim["n"], seed=cfg.seed,
            gains=gains, kicks=_schedule(cfg), x0=cfg.sim["x0"],
        )
    )
    prov = cfg.provenance()
    sim.trace.to_csv(out / "trace.csv", prov)
    sim.write_states_csv(out / "states.csv", cfg.model.state_labels, prov)
    an = cfg.analysis
    seg = min(an["segment_length"], cfg.sim["n"])
    psd = welch_psd(sim.trace.y[:, 0], 1.0 / cfg.sim["t_s"], seg, an["overlap"], an["window"])
    name = "psd_controlled.csv" if gains is not None else "psd_uncontrolled.csv"
    psd.to_csv(out / name, prov)
    u_max = float(np.max(np.abs(sim.trace.u))) if sim.trace.u.size else 0.0
    lines = [f"# {prov}", f"samples: {cfg.sim['n']}", f"feedback: {gains is not None}", f"max |u|: {u_max:.6g} V"]
    if cfg.control["u_max_v"] is not None and u_max > cfg.control["u_max_v"]:
        lines.append(f"warning: input exceeds the configured bound of {cfg.control['u_max_v']} V")
    for i, md in enumerate(cfg.model.modes):
        lines.append(f"mode {i + 1} PSD peak near {md.f:.6g} Hz: {psd.peak_near(md.f):.6g} (m/s)^2/Hz")
    (out / "simulate_report.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines[1:]))
    return sim


def _segments(indices, n):
    # each kick is estimated on the data between its neighbouring kicks
    idx = sorted(indices)
    bounds = [0] + idx + [n]
    return [(bounds[j - 1], bounds[j], bounds[j + 1]) for j in range(1, len(idx) + 1)]


def cmd_estimate(cfg: ExperimentConfig, trace_path: str | None = None):
    out = cfg.output
    out.mkdir(parents=True, exist_ok=True)
    if not cfg.kick["schedule"]:
        raise ConfigError("kick.schedule", "no kick indices given to estimate")
    if trace_path is not None:
        trace = Trace.from_csv(trace_path)
        truth = {ev["index"]: float(ev.get("momentum", float("nan"))) for ev in cfg.kick["schedule"]}
    else:
        trace = cmd_simulate(cfg).trace
        truth = {ev["index"]: float(ev.get("momentum", 0.0)) for ev in cfg.kick["schedule"]}
    disc = discretize(cfg.model, trace.T_s)
    prior = _prior(cfg, disc)
    rows = []
    for lo, t_p, hi in _segments(truth, len(trace)):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            est = estimate_kick(trace.segment(lo, hi), cfg.model, t_p - lo, prior, discrete=disc)
        rows.append((len(rows), truth[t_p], est))
    prov = cfg.provenance()
    write_ensemble_csv(out / "kicks.csv", rows, prov)
    # kick transients are not part of the noise model, so only pre-kick data
    white = _whiteness(cfg, trace, disc, stop=min(truth))
    lines = [f"# {prov}", f"kicks: {len(rows)}"]
    for _, p, est in rows:
        flag = "" if est.stationary else "  (segment not stationary)"
        lines.append(
            f"t_p={est.t_p:.9g} s p_applied={p:.6g} p_est={est.momenta[0]:.6g} kg m/s "
            f"dv1={est.dv(0):.6g} +- {est.bound_dv(0):.3g} m/s{flag}"
        )
    lines.append(f"whiteness: {'pass' if white.passed else 'fail'} (lags within: {white.fraction_within:.3f}, flatness {white.flatness_db:.2f} dB)")
    (out / "estimate_report.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines[1:]))
    return rows, white


def cmd_montecarlo(cfg: ExperimentConfig, workers: int | None = None):
    out = cfg.output
    out.mkdir(parents=True, exist_ok=True)
    k = cfg.kick
    T_s = cfg.sim["t_s"]
    gains = _regulator(cfg)
    disc = discretize(cfg.model, T_s)
    prior = _prior(cfg, disc)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        outcomes = run_montecarlo(
            cfg.model, k["magnitudes"], k["trials"], T_s=T_s, n_before=k["n_before"], n_after=k["n_after"],
            seed=cfg.seed, gains=gains, prior=prior, weights=tuple(k["weights"]), workers=workers or k["workers"],
        )
    prov = cfg.provenance()
    write_ensemble_csv(out / "ensemble.csv", [(o.trial, o.momentum, o.estimate) for o in outcomes], prov)
    m_eff = cfg.model.modes[0].m_eff
    dv_applied = [o.dv_true for o in outcomes]
    dv_est = [o.estimate.dv(0) for o in outcomes]
    bound = outcomes[0].estimate.bound_dv(0)
    lines = [f"# {prov}", f"trials: {len(outcomes)}", f"bound (mode 1 velocity): {bound:.6g} m/s"]
    stats = None
    if len(set(dv_applied)) >= 2:
        stats = ensemble_stats(dv_applied, dv_est)
        stats.to_csv(out / "stats.csv", prov)
        lines.append(f"slope: {stats.slope:.6g}  intercept: {stats.intercept:.6g} m/s")
        for g in stats.groups:
            lines.append(
                f"p={g.magnitude * m_eff:.4g} kg m/s dv={g.magnitude:.4g} m/s mean={g.mean:.6g} "
                f"std={g.std:.4g} ({g.std / bound:.3f} x bound) n={g.n}"
            )
    # whiteness on one kick-free trace from the first stream no trial uses
    spare = len(k["magnitudes"]) * k["trials"]
    n_white = max(k["n_before"] + k["n_after"], 20_000)
    sim = simulate(SimConfig(cfg.model, T_s, n_white, cfg.seed, gains, trial=spare))
    white = _whiteness(cfg, sim.trace, disc)
    lines.append(f"whiteness: {'pass' if white.passed else 'fail'} (lags within: {white.fraction_within:.3f}, flatness {white.flatness_db:.2f} dB)")
    (out / "montecarlo_report.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines[1:]))
    return outcomes, stats, white


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kicksense", description="Momentum-kick estimation for a feedback-controlled resonator.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("build", "build the model and regulator, report structural properties"),
        ("simulate", "simulate a trace and its PSD"),
        ("estimate", "estimate scheduled kicks on a stored or simulated trace"),
        ("montecarlo", "Monte Carlo kick reconstruction ensemble"),
    ):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, help="JSON configuration file")
        s.add_argument("--seed", type=int, default=None, help="overrides sim.seed")
        s.add_argument("--out", default=None, help="output directory (overrides output)")
        if name in ("simulate", "estimate", "montecarlo"):
            fb = s.add_mutually_exclusive_group()
            fb.add_argument("--feedback", dest="feedback", action="store_true", default=None)
            fb.add_argument("--no-feedback", dest="feedback", action="store_false")
        if name == "estimate":
            s.add_argument("--trace", default=None, help="trace CSV (t,y,u); simulated from the config if omitted")
        if name == "montecarlo":
            s.add_argument("--workers", type=int, default=None)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed, output=args.out)
        if getattr(args, "feedback", None) is not None:
            raw = {**cfg.raw, "sim": {**cfg.sim, "feedback": args.feedback}}
            cfg = load_config(raw)
        if args.command == "build":
            cmd_build(cfg)
        elif args.command == "simulate":
            cmd_simulate(cfg)
        elif args.command == "estimate":
            cmd_estimate(cfg, args.trace)
        else:
            cmd_montecarlo(cfg, args.workers)
    except (ConfigError, KickError, SimulationError, SpectralError, ValueError) as exc:
        if isinstance(exc, NUMERICAL_ERRORS):
            print(f"numerical failure: {exc}", file=sys.stderr)
            return EXIT_NUMERICAL
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
