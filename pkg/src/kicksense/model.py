"""Continuous-time state-space model of a multimode resonator.

Each mechanical mode contributes a 2-state block ``[z_i, v_i]`` (position in m,
velocity in m/s). Two further 2-state blocks model spurious content of the
measured velocity signal: a weakly damped oscillator (``np``) and a band-pass
section (``nf``). The measured output is the sum of all modal velocities plus
the outputs of the two disturbance blocks.

All power spectral densities handled here are one-sided, in ``unit**2/Hz``.
A white process ``eta`` with ``E[eta(t) eta(t')] = delta(t - t')`` has a one-sided
PSD of 2, so a one-sided PSD ``S`` enters the input matrices as ``sqrt(S / 2)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import block_diag

K_B = 1.380649e-23
"""Boltzmann constant [J/K] (exact SI value)."""

DEFAULT_TEMPERATURE = 300.0

_MIN_REL_FREQ_SEPARATION = 1e-6


class ModelError(ValueError):
    """Raised for invalid physical or structural model parameters."""


def _require_finite(**values: float) -> None:
    for name, value in values.items():
        if not math.isfinite(value):
            raise ModelError(f"{name} must be finite, got {value!r}")


@dataclass(frozen=True)
class ModeParams:
    """Physical parameters of one resonator mode.

    Attributes
    ----------
    f : float
        Resonance frequency [Hz].
    Q : float
        Quality factor.
    m_eff : float
        Effective mass [kg].
    b_F : float
        Actuation gain [N/V].
    T : float
        Temperature of the thermal bath [K].
    """

    f: float
    Q: float
    m_eff: float
    b_F: float = 0.0
    T: float = DEFAULT_TEMPERATURE

    def __post_init__(self) -> None:
        _require_finite(f=self.f, Q=self.Q, m_eff=self.m_eff, b_F=self.b_F, T=self.T)
        if self.f <= 0:
            raise ModelError(f"mode frequency must be positive, got {self.f}")
        if self.Q <= 0:
            raise ModelError(f"quality factor must be positive, got {self.Q}")
        if self.m_eff <= 0:
            raise ModelError(f"effective mass must be positive, got {self.m_eff}")
        if self.T < 0:
            raise ModelError(f"temperature must be non-negative, got {self.T}")

    @property
    def omega(self) -> float:
        """Angular resonance frequency [rad/s]."""
        return 2.0 * math.pi * self.f

    @property
    def gamma_eff(self) -> float:
        """Effective damping coefficient [kg/s]."""
        return self.omega * self.m_eff / self.Q

    @property
    def k_eff(self) -> float:
        """Effective spring constant [N/m]."""
        return self.omega**2 * self.m_eff


@dataclass(frozen=True)
class DisturbanceParams:
    """Measurement disturbance model.

    ``peak_gain`` and ``bp_gain`` are the square roots of the one-sided output
    PSD of the respective block at its center frequency, in output units per
    sqrt(Hz). The band-pass center is the geometric mean of its cutoffs.
    The default gains are placeholders that put the 21 kHz peak near
    1e-12 (m/s)^2/Hz and the broadband rise near 1e-14 (m/s)^2/Hz.
    """

    peak_freq: float = 21e3
    peak_Q: float = 50.0
    peak_gain: float = 1e-6
    bp_low: float = 10e3
    bp_high: float = 200e3
    bp_gain: float = 1e-7

    def __post_init__(self) -> None:
        _require_finite(
            peak_freq=self.peak_freq,
            peak_Q=self.peak_Q,
            peak_gain=self.peak_gain,
            bp_low=self.bp_low,
            bp_high=self.bp_high,
            bp_gain=self.bp_gain,
        )
        if self.peak_freq <= 0 or self.peak_Q <= 0:
            raise ModelError("disturbance peak frequency and Q must be positive")
        if not 0 < self.bp_low < self.bp_high:
            raise ModelError(
                f"band-pass cutoffs must satisfy 0 < low < high, got {self.bp_low}, {self.bp_high}"
            )
        if self.peak_gain < 0 or self.bp_gain < 0:
            raise ModelError("disturbance gains must be non-negative")


@dataclass(frozen=True)
class StateSpaceModel:
    """Continuous-time linear model ``dx = A x + B u + G eta``, ``y = C x + nu``.

    ``R`` is the intensity of the continuous measurement noise ``nu``.
    ``modes`` keeps the physical parameters of the mechanical blocks, which
    occupy the first ``2 * len(modes)`` states in order.
    """

    A: np.ndarray
    B: np.ndarray
    G: np.ndarray
    C: np.ndarray
    R: np.ndarray
    state_labels: tuple[str, ...]
    modes: tuple[ModeParams, ...] = ()
    blocks: tuple[tuple[int, int], ...] = field(default=())

    def __post_init__(self) -> None:
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ModelError("A must be square")
        if self.B.shape[0] != n or self.G.shape[0] != n or self.C.shape[1] != n:
            raise ModelError("inconsistent matrix dimensions")
        m_y = self.C.shape[0]
        if self.R.shape != (m_y, m_y):
            raise ModelError("R must be square with one row per output")
        if not np.allclose(self.R, self.R.T, rtol=1e-12, atol=0.0):
            raise ModelError("R must be symmetric")
        if np.any(np.linalg.eigvalsh(self.R) <= 0):
            raise ModelError("R must be positive definite")
        if len(self.state_labels) != n:
            raise ModelError("one state label per state required")
        for arr in (self.A, self.B, self.G, self.C, self.R):
            arr.setflags(write=False)

    @property
    def n_states(self) -> int:
        return self.A.shape[0]

    def velocity_index(self, mode: int) -> int:
        """State index of the velocity of mechanical mode ``mode`` (0-based)."""
        if not 0 <= mode < len(self.modes):
            raise IndexError(f"model has {len(self.modes)} modes, asked for {mode}")
        return 2 * mode + 1

    def position_index(self, mode: int) -> int:
        return self.velocity_index(mode) - 1

    def with_measurement_noise(self, R) -> StateSpaceModel:
        """Copy of the model with a different measurement-noise intensity."""
        return StateSpaceModel(
            A=self.A.copy(),
            B=self.B.copy(),
            G=self.G.copy(),
            C=self.C.copy(),
            R=np.atleast_2d(np.asarray(R, dtype=float)).copy(),
            state_labels=self.state_labels,
            modes=self.modes,
            blocks=self.blocks,
        )


def thermomechanical_psd(mode: ModeParams) -> float:
    """One-sided thermomechanical force-noise PSD ``4 k_B T gamma_eff`` [N^2/Hz]."""
    return 4.0 * K_B * mode.T * mode.gamma_eff


def _companion(omega: float, damping: float) -> np.ndarray:
    return np.array([[0.0, 1.0], [-omega * omega, -damping]])


def build_mode_system(mode: ModeParams):
    """Return ``(A_i, B_i, G_i, C_i)`` for one mechanical mode.

    The force noise and the actuation force are divided by the effective mass
    so that they enter the velocity equation in m/s^2.
    """
    A = _companion(mode.omega, mode.omega / mode.Q)
    B = np.array([[0.0], [mode.b_F / mode.m_eff]])
    G = np.array([[0.0], [math.sqrt(thermomechanical_psd(mode) / 2.0) / mode.m_eff]])
    C = np.array([[0.0, 1.0]])
    return A, B, G, C


def build_disturbance_system(dist: DisturbanceParams):
    """Return ``(A, G, C)`` of the stacked ``np`` and ``nf`` disturbance blocks.

    Both blocks are companion forms whose output is the second state, giving
    the band-pass shaped transfer ``s / (s^2 + a1 s + a0)``.
    """
    w_p = 2.0 * math.pi * dist.peak_freq
    A_np = _companion(w_p, w_p / dist.peak_Q)
    # |H(i w_p)| = Q / w_p for unit drive
    G_np = np.array([[0.0], [dist.peak_gain * (w_p / dist.peak_Q) / math.sqrt(2.0)]])

    w_l = 2.0 * math.pi * dist.bp_low
    w_h = 2.0 * math.pi * dist.bp_high
    A_nf = np.array([[0.0, 1.0], [-w_l * w_h, -(w_l + w_h)]])
    # |H| peaks at sqrt(w_l w_h) with value 1 / (w_l + w_h)
    G_nf = np.array([[0.0], [dist.bp_gain * (w_l + w_h) / math.sqrt(2.0)]])

    A = block_diag(A_np, A_nf)
    G = block_diag(G_np, G_nf)
    C = np.array([[0.0, 1.0, 0.0, 1.0]])
    return A, G, C


def build_full_model(
    modes, dist: DisturbanceParams | None = None, measurement_noise_psd: float = 1e-14
) -> StateSpaceModel:
    """Assemble the block-diagonal resonator plus disturbance model.

    Parameters
    ----------
    modes : sequence of ModeParams
        Mechanical modes, at least one.
    dist : DisturbanceParams, optional
        Disturbance model; ``None`` means none. Blocks whose gain is zero
        are omitted.
    measurement_noise_psd : float
        One-sided PSD of the white measurement noise [(m/s)^2/Hz]. The
        continuous intensity stored in ``R`` is half of it.
    """
    modes = tuple(modes)
    if not modes:
        raise ModelError("modes: at least one required")
    if dist is None:
        dist = DisturbanceParams(peak_gain=0.0, bp_gain=0.0)
    if not measurement_noise_psd > 0 or not math.isfinite(measurement_noise_psd):
        raise ModelError("measurement_noise_psd must be positive and finite")

    freqs = sorted(m.f for m in modes)
    for lo, hi in zip(freqs, freqs[1:]):
        if (hi - lo) <= _MIN_REL_FREQ_SEPARATION * hi:
            raise ModelError(f"degenerate mode frequencies {lo} and {hi}")

    As, Bs, Gs, Cs, labels, blocks = [], [], [], [], [], []
    for i, mode in enumerate(modes):
        A_i, B_i, G_i, C_i = build_mode_system(mode)
        As.append(A_i)
        Bs.append(B_i)
        Gs.append(G_i)
        Cs.append(C_i)
        labels += [f"z{i + 1}", f"v{i + 1}"]
        blocks.append((2 * i, 2 * i + 2))

    # a disturbance block with zero drive has an identically zero output and
    # zero-variance states, so it is left out
    A_d, G_d, C_d = build_disturbance_system(dist)
    offset = 2 * len(modes)
    for j, (name, gain) in enumerate((("np", dist.peak_gain), ("nf", dist.bp_gain))):
        if gain == 0.0:
            continue
        sl = slice(2 * j, 2 * j + 2)
        As.append(A_d[sl, sl])
        Gs.append(G_d[sl, j : j + 1])
        Cs.append(C_d[:, sl])
        labels += [f"{name}1", f"{name}2"]
        blocks.append((offset, offset + 2))
        offset += 2

    A = block_diag(*As)
    B = np.vstack(Bs + [np.zeros((offset - 2 * len(modes), 1))])
    G = block_diag(*Gs)
    C = np.hstack(Cs)
    R = np.array([[measurement_noise_psd / 2.0]])
    return StateSpaceModel(
        A=A, B=B, G=G, C=C, R=R, state_labels=tuple(labels), modes=modes, blocks=tuple(blocks)
    )


def output_psd(model: StateSpaceModel, freqs) -> np.ndarray:
    """Analytic one-sided PSD of the measured output for ``u = 0``.

    ``S(f) = 2 (|C (i w - A)^-1 G|^2 + R)`` for a single output.
    """
    freqs = np.atleast_1d(np.asarray(freqs, dtype=float))
    n = model.n_states
    eye = np.eye(n)
    out = np.empty(freqs.shape)
    GGt_cols = model.G
    for k, f in enumerate(freqs):
        H = model.C @ np.linalg.solve(2j * math.pi * f * eye - model.A, GGt_cols)
        out[k] = 2.0 * (np.sum(np.abs(H) ** 2) + model.R[0, 0])
    return out


@dataclass(frozen=True)
class ModeShape:
    """Sampled eigenmode on a volumetric grid."""

    positions: np.ndarray
    phi: np.ndarray
    density: np.ndarray
    cell_volumes: np.ndarray

    def __post_init__(self) -> None:
        n = len(self.phi)
        if n == 0:
            raise ModelError("mode shape needs at least one sample")
        if len(self.density) != n or len(self.cell_volumes) != n:
            raise ModelError("phi, density and cell_volumes must have equal length")
        if np.any(np.asarray(self.cell_volumes) <= 0):
            raise ModelError("cell volumes must be positive")
        if np.any(np.asarray(self.density) < 0):
            raise ModelError("density must be non-negative")

    @classmethod
    def from_csv(cls, path) -> ModeShape:
        """Read a CSV with columns ``x,y,z,phi,rho,dv``."""
        with Path(path).open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ModelError(f"{path}: no samples")
        data = {k: np.array([float(r[k]) for r in rows]) for k in ("x", "y", "z", "phi", "rho", "dv")}
        return cls(
            positions=np.column_stack([data["x"], data["y"], data["z"]]),
            phi=data["phi"],
            density=data["rho"],
            cell_volumes=data["dv"],
        )


def effective_mass(shape: ModeShape) -> float:
    """Effective modal mass, the density-weighted volume integral of ``|phi|^2``."""
    phi = np.asarray(shape.phi)
    return float(np.sum(np.abs(phi) ** 2 * np.asarray(shape.density) * np.asarray(shape.cell_volumes)))


def force_calibration(A_in: float, A_out: float, mode: ModeParams, C_m: float) -> float:
    """Actuation gain from the resonant response to a sinusoidal drive.

    ``A_in`` is the drive amplitude [V], ``A_out`` the measured response
    amplitude and ``C_m`` the measurement gain of the detection chain.
    """
    if A_in <= 0:
        raise ModelError("drive amplitude must be positive")
    if C_m <= 0:
        raise ModelError("measurement gain must be positive")
    return A_out * mode.Q / (A_in * C_m * mode.omega)
