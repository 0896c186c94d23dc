"""Experiment configuration: JSON schema, validation and model construction."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np

from .model import DEFAULT_TEMPERATURE, DisturbanceParams, ModelError, ModeParams, StateSpaceModel, build_full_model

# One-sided measurement-noise PSD [(m/s)^2/Hz] at which the mode-1 kick bound
# equals 2.9e-6 m/s for mode 1 alone, T_s = 1 us, 32768-sample segments on
# each side of the kick and the default prior. A calibration of the
# simulator, not a property of any detector.
CALIBRATED_MEASUREMENT_NOISE_PSD = 1.4656e-14


class ConfigError(ValueError):
    """Validation failure; ``path`` points at the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}
_int_pos = {"type": "integer", "minimum": 1}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["model"],
    "properties": {
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["modes"],
            "properties": {
                "modes": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["f_hz", "q", "m_eff_kg"],
                        "properties": {"f_hz": _pos, "q": _pos, "m_eff_kg": _pos, "b_f": _num},
                    },
                },
                "disturbance": {
                    "type": ["object", "null"],
                    "additionalProperties": False,
                    "properties": {
                        "peak_freq_hz": _pos,
                        "peak_q": _pos,
                        "peak_gain": _nonneg,
                        "bp_low_hz": _pos,
                        "bp_high_hz": _pos,
                        "bp_gain": _nonneg,
                    },
                },
                "temperature_k": _nonneg,
                "measurement_noise_psd": _pos,
            },
        },
        "control": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_weight": _pos,
                "state_weights": {"type": ["array", "null"], "items": {"type": "array", "items": _num}},
                "gains_file": {"type": ["string", "null"]},
                "t_exec": _pos,
                "u_max_v": {"type": ["number", "null"], "exclusiveMinimum": 0},
            },
        },
        "sim": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "t_s": _pos,
                "n": {"type": "integer"},
                "seed": {"type": "integer", "minimum": 0},
                "feedback": {"type": "boolean"},
                "x0": {"enum": ["stationary", "zero"]},
            },
        },
        "kick": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "schedule": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["index"],
                        "properties": {"index": {"type": "integer", "minimum": 1}, "momentum": _num},
                    },
                },
                "magnitudes": {"type": "array", "items": _num},
                "trials": _int_pos,
                "n_before": _int_pos,
                "n_after": _int_pos,
                "prior_sigma2": {"type": ["array", "null"], "items": _nonneg},
                "prior_factor": _pos,
                "weights": {"type": "array", "items": _num, "minItems": 1},
                "workers": _int_pos,
            },
        },
        "analysis": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "segment_length": _int_pos,
                "overlap": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "window": {"type": "string"},
                "whiteness_band_hz": {"type": "array", "items": _pos, "minItems": 2, "maxItems": 2},
                "whiteness_segment": _int_pos,
                "whiteness_lags": _int_pos,
            },
        },
        "output": {"type": "string"},
    },
}

DEFAULTS = {
    "model": {
        "disturbance": None,
        "temperature_k": DEFAULT_TEMPERATURE,
        "measurement_noise_psd": CALIBRATED_MEASUREMENT_NOISE_PSD,
    },
    "control": {"n_weight": 1e8, "state_weights": None, "gains_file": None, "t_exec": 200e-9, "u_max_v": None},
    "sim": {"t_s": 1e-6, "n": 1 << 20, "seed": 0, "feedback": True, "x0": "stationary"},
    "kick": {
        "schedule": [],
        "magnitudes": [3.6e-17, 8.4e-17, 1.32e-16, 1.8e-16],
        "trials": 100,
        "n_before": 32768,
        "n_after": 32768,
        "prior_sigma2": None,
        "prior_factor": 1e6,
        "weights": [1.0],
        "workers": 1,
    },
    "analysis": {
        "segment_length": 1 << 16,
        "overlap": 0.5,
        "window": "hann",
        "whiteness_band_hz": [10e3, 130e3],
        "whiteness_segment": 4096,
        "whiteness_lags": 100,
    },
    "output": "out",
}

# the three modes the feedback acts on
THREE_MODES = [
    {"f_hz": 23.05e3, "q": 110000, "m_eff_kg": 4.52e-12, "b_f": 1e-9},
    {"f_hz": 68.02e3, "q": 150000, "m_eff_kg": 6.06e-13, "b_f": 1e-9},
    {"f_hz": 114.05e3, "q": 112000, "m_eff_kg": 2.23e-13, "b_f": 1e-9},
]

DEFAULT_DISTURBANCE = {
    "peak_freq_hz": 21e3,
    "peak_q": 50.0,
    "peak_gain": 1e-6,
    "bp_low_hz": 10e3,
    "bp_high_hz": 200e3,
    "bp_gain": 1e-7,
}


def three_mode_config() -> dict:
    """Three-mode resonator with the disturbance model and default settings."""
    return {"model": {"modes": copy.deepcopy(THREE_MODES), "disturbance": dict(DEFAULT_DISTURBANCE)}}


def _merge(defaults: dict, given: dict) -> dict:
    out = copy.deepcopy(defaults)
    for key, val in given.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _path(parts) -> str:
    s = ""
    for p in parts:
        s += f"[{p}]" if isinstance(p, int) else (f".{p}" if s else str(p))
    return s


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict
    model: StateSpaceModel

    @property
    def control(self) -> dict:
        return self.raw["control"]

    @property
    def sim(self) -> dict:
        return self.raw["sim"]

    @property
    def kick(self) -> dict:
        return self.raw["kick"]

    @property
    def analysis(self) -> dict:
        return self.raw["analysis"]

    @property
    def output(self) -> Path:
        return Path(self.raw["output"])

    @property
    def seed(self) -> int:
        return int(self.sim["seed"])

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form of the fully defaulted configuration.

        The output directory is excluded: it says where results go, not what they are.
        """
        body = {k: v for k, v in self.raw.items() if k != "output"}
        text = json.dumps(body, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def provenance(self) -> str:
        return f"config_sha256={self.digest()} seed={self.seed}"


def _build_model(m: dict) -> StateSpaceModel:
    T = float(m["temperature_k"])
    modes = []
    if not m["modes"]:
        raise ConfigError("model.modes", "at least one required")
    for i, md in enumerate(m["modes"]):
        try:
            modes.append(ModeParams(f=md["f_hz"], Q=md["q"], m_eff=md["m_eff_kg"], b_F=md.get("b_f", 0.0), T=T))
        except ModelError as exc:
            raise ConfigError(f"model.modes[{i}]", str(exc)) from exc
    dist = None
    if m["disturbance"] is not None:
        d = {**DEFAULT_DISTURBANCE, **m["disturbance"]}
        try:
            dist = DisturbanceParams(
                peak_freq=d["peak_freq_hz"], peak_Q=d["peak_q"], peak_gain=d["peak_gain"],
                bp_low=d["bp_low_hz"], bp_high=d["bp_high_hz"], bp_gain=d["bp_gain"],
            )
        except ModelError as exc:
            raise ConfigError("model.disturbance", str(exc)) from exc
    try:
        return build_full_model(modes, dist, m["measurement_noise_psd"])
    except ModelError as exc:
        raise ConfigError("model", str(exc)) from exc


def load_config(source, seed: int | None = None, output: str | None = None) -> ExperimentConfig:
    """Validate a config (path or dict), fill defaults and build the model.

    Every section is checked before anything is computed; failures raise
    :class:`ConfigError` naming the field.
    """
    if isinstance(source, (str, Path)):
        try:
            given = json.loads(Path(source).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"{source}: invalid JSON ({exc})") from exc
        except OSError as exc:
            raise ConfigError("", f"cannot read {source}: {exc}") from exc
    else:
        given = copy.deepcopy(source)
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(given), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise ConfigError(_path(err.absolute_path) or "<root>", err.message)
    raw = _merge(DEFAULTS, given)
    if seed is not None:
        if seed < 0:
            raise ConfigError("sim.seed", "must be non-negative")
        raw["sim"]["seed"] = int(seed)
    if output is not None:
        raw["output"] = str(output)

    model = _build_model(raw["model"])
    n_modes = len(model.modes)

    sim = raw["sim"]
    if sim["n"] < 1:
        raise ConfigError("sim.n", f"must be at least 1, got {sim['n']}")
    ctl = raw["control"]
    if sim["feedback"] and not any(md.b_F for md in model.modes) and ctl["gains_file"] is None:
        raise ConfigError("sim.feedback", "feedback requested but every mode has b_f = 0")
    ratio = sim["t_s"] / ctl["t_exec"]
    if sim["feedback"] and abs(ratio - round(ratio)) > 1e-9 * ratio:
        raise ConfigError("control.t_exec", "sim.t_s must be an integer multiple of t_exec")
    if ctl["state_weights"] is not None:
        M = np.asarray(ctl["state_weights"], dtype=float)
        if M.shape != (model.n_states, model.n_states):
            raise ConfigError("control.state_weights", f"expected {model.n_states}x{model.n_states} matrix")

    kick = raw["kick"]
    if kick["prior_sigma2"] is not None and len(kick["prior_sigma2"]) != n_modes:
        raise ConfigError("kick.prior_sigma2", f"expected {n_modes} entries")
    if len(kick["weights"]) > n_modes:
        raise ConfigError("kick.weights", f"at most {n_modes} entries")
    for i, ev in enumerate(kick["schedule"]):
        if ev["index"] >= sim["n"]:
            raise ConfigError(f"kick.schedule[{i}].index", f"must be below sim.n = {sim['n']}")
    idx = [ev["index"] for ev in kick["schedule"]]
    if len(set(idx)) != len(idx):
        raise ConfigError("kick.schedule", "duplicate kick indices")

    an = raw["analysis"]
    lo, hi = an["whiteness_band_hz"]
    if not lo < hi:
        raise ConfigError("analysis.whiteness_band_hz", "lower edge must be below upper edge")
    if hi > 0.5 / sim["t_s"]:
        raise ConfigError("analysis.whiteness_band_hz", "band exceeds the Nyquist frequency")
    return ExperimentConfig(raw=raw, model=model)


__all__ = [
    "CALIBRATED_MEASUREMENT_NOISE_PSD",
    "ConfigError",
    "ExperimentConfig",
    "DEFAULT_DISTURBANCE",
    "THREE_MODES",
    "SCHEMA",
    "load_config",
    "three_mode_config",
]
