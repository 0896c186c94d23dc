import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kicksense.model import (
    K_B,
    DisturbanceParams,
    ModelError,
    ModeParams,
    ModeShape,
    build_disturbance_system,
    build_full_model,
    build_mode_system,
    effective_mass,
    force_calibration,
    output_psd,
    thermomechanical_psd,
)
from kicksense.riccati import continuous_lyapunov

from conftest import MODE1


# -- thermomechanical noise ------------------------------------------------------------


def test_thermomechanical_psd_mode1():
    # hand evaluation of 4 k_B T * 2 pi f m / Q for the 23.05 kHz mode
    gamma = 2 * math.pi * 23.05e3 * 4.52e-12 / 110000
    assert MODE1.gamma_eff == pytest.approx(gamma, rel=1e-14)
    assert MODE1.gamma_eff == pytest.approx(5.95e-12, rel=1e-3)
    assert thermomechanical_psd(MODE1) == pytest.approx(9.86e-32, rel=1e-3)


def test_thermomechanical_psd_zero_temperature():
    assert thermomechanical_psd(ModeParams(1e3, 10, 1e-12, T=0.0)) == 0.0


@given(st.floats(1.0, 1e3), st.floats(1e2, 1e6), st.floats(1.0, 1e6))
def test_thermomechanical_psd_linear_in_temperature(T, f, Q):
    a = thermomechanical_psd(ModeParams(f, Q, 1e-12, T=T))
    b = thermomechanical_psd(ModeParams(f, Q, 1e-12, T=2 * T))
    assert b == pytest.approx(2 * a, rel=1e-15)


@pytest.mark.parametrize(
    "kwargs",
    [dict(f=0.0, Q=1, m_eff=1), dict(f=1, Q=-1, m_eff=1), dict(f=1, Q=1, m_eff=0), dict(f=1, Q=1, m_eff=1, T=-1)],
)
def test_mode_params_rejects_invalid(kwargs):
    with pytest.raises(ModelError):
        ModeParams(**kwargs)


def test_derived_mode_quantities_positive():
    assert MODE1.omega > 0 and MODE1.gamma_eff > 0 and MODE1.k_eff > 0
    assert MODE1.k_eff == pytest.approx(MODE1.omega**2 * MODE1.m_eff)


# -- mode block ------------------------------------------------------------------------


def test_mode_block_unit_frequency():
    A, B, G, C = build_mode_system(ModeParams(f=1 / (2 * math.pi), Q=1e12, m_eff=1.0))
    np.testing.assert_allclose(A, [[0, 1], [-1, -1e-12]], rtol=1e-14, atol=0)
    np.testing.assert_array_equal(C, [[0, 1]])


def test_mode_block_mode1_stiffness():
    A, *_ = build_mode_system(MODE1)
    assert A[1, 0] == pytest.approx(-((2 * math.pi * 23050) ** 2), rel=1e-14)
    assert A[1, 0] == pytest.approx(-2.097e10, rel=1e-3)


def test_zero_actuation_gives_zero_input_column():
    _, B, _, _ = build_mode_system(ModeParams(23e3, 1e4, 1e-12, b_F=0.0))
    assert not B.any()


def test_velocity_variance_obeys_equipartition():
    # the noise column must make <v^2> m_eff equal k_B T in the continuous model
    A, _, G, _ = build_mode_system(MODE1)
    P = continuous_lyapunov(A, G @ G.T)
    assert P[1, 1] * MODE1.m_eff == pytest.approx(K_B * MODE1.T, rel=1e-9)
    assert P[0, 0] * MODE1.k_eff == pytest.approx(K_B * MODE1.T, rel=1e-9)


@settings(max_examples=50)
@given(st.floats(1e2, 1e6), st.floats(10.0, 1e7))
def test_companion_block_spectrum(f, Q):
    A, *_ = build_mode_system(ModeParams(f, Q, 1e-12))
    w = 2 * math.pi * f
    expected = -w / (2 * Q) + 1j * w * math.sqrt(1 - 1 / (4 * Q * Q))
    ev = np.linalg.eigvals(A)
    ev = ev[np.argmax(ev.imag)]
    assert abs(ev - expected) <= 1e-9 * abs(expected)


# -- full model ------------------------------------------------------------------------


def test_three_mode_model_layout(three_mode_model):
    assert three_mode_model.n_states == 10
    assert len(three_mode_model.state_labels) == 2 * 3 + 4
    assert three_mode_model.state_labels[:6] == ("z1", "v1", "z2", "v2", "z3", "v3")
    assert three_mode_model.velocity_index(2) == 5


def test_block_diagonal_structure(three_mode_model):
    mask = np.zeros_like(three_mode_model.A, dtype=bool)
    for lo, hi in three_mode_model.blocks:
        mask[lo:hi, lo:hi] = True
    assert not three_mode_model.A[~mask].any()
    for i, mode in enumerate(three_mode_model.modes):
        blk = three_mode_model.A[2 * i : 2 * i + 2, 2 * i : 2 * i + 2]
        np.testing.assert_array_equal(blk, [[0, 1], [-mode.omega**2, -mode.omega / mode.Q]])


def test_zero_gain_disturbance_is_omitted():
    off = DisturbanceParams(peak_gain=0.0, bp_gain=0.0)
    a = build_full_model([MODE1], off, 1e-14)
    b = build_full_model([MODE1], None, 1e-14)
    assert a.n_states == 2
    f = np.linspace(1e3, 200e3, 501)
    np.testing.assert_array_equal(output_psd(a, f), output_psd(b, f))
    only_peak = build_full_model([MODE1], DisturbanceParams(bp_gain=0.0), 1e-14)
    assert only_peak.state_labels == ("z1", "v1", "np1", "np2")


def test_disturbance_gain_sets_center_psd():
    # one-sided output PSD of each block at its center equals gain^2
    d = DisturbanceParams(peak_gain=3e-6, bp_gain=2e-7)
    A, G, C = build_disturbance_system(d)
    for j, (f0, g) in enumerate([(d.peak_freq, d.peak_gain), (math.sqrt(d.bp_low * d.bp_high), d.bp_gain)]):
        sl = slice(2 * j, 2 * j + 2)
        H = C[:, sl] @ np.linalg.solve(2j * math.pi * f0 * np.eye(2) - A[sl, sl], G[sl, j : j + 1])
        assert 2 * abs(H[0, 0]) ** 2 == pytest.approx(g * g, rel=1e-12)


def test_measurement_noise_is_half_the_one_sided_psd():
    m = build_full_model([MODE1], None, 4e-14)
    assert m.R[0, 0] == 2e-14
    # far from every pole the output PSD is the white floor
    assert output_psd(m, [450e3])[0] == pytest.approx(4e-14, rel=1e-3)


def test_three_mode_model_psd_peaks_at_modes(three_mode_model):
    for mode in three_mode_model.modes:
        df = mode.f / mode.Q / 20
        f = mode.f + df * np.arange(-200, 201)
        S = output_psd(three_mode_model, f)
        assert abs(f[np.argmax(S)] - mode.f) <= df


def test_matrices_are_read_only(three_mode_model):
    with pytest.raises(ValueError):
        three_mode_model.A[0, 0] = 1.0


def test_empty_modes_rejected():
    with pytest.raises(ModelError, match="modes: at least one required"):
        build_full_model([], None)


def test_degenerate_frequencies_rejected():
    with pytest.raises(ModelError, match="degenerate"):
        build_full_model([ModeParams(1e4, 10, 1e-12), ModeParams(1e4, 20, 2e-12)])


@pytest.mark.parametrize("psd", [0.0, -1.0, float("inf")])
def test_measurement_noise_must_be_positive(psd):
    with pytest.raises(ModelError):
        build_full_model([MODE1], None, psd)


def test_disturbance_cutoffs_validated():
    with pytest.raises(ModelError):
        DisturbanceParams(bp_low=2e5, bp_high=1e4)
    with pytest.raises(ModelError):
        DisturbanceParams(peak_gain=-1.0)


# -- effective mass --------------------------------------------------------------------


def _uniform_shape(phi, rho, volume, n):
    return ModeShape(
        positions=np.zeros((n, 3)), phi=np.full(n, phi), density=np.full(n, rho), cell_volumes=np.full(n, volume / n)
    )


def test_effective_mass_rigid_body():
    assert effective_mass(_uniform_shape(1.0, 2330.0, 1e-15, 64)) == pytest.approx(2330.0 * 1e-15, rel=1e-14)


def test_effective_mass_quadratic_in_amplitude():
    assert effective_mass(_uniform_shape(0.5, 2330.0, 1e-15, 64)) == pytest.approx(0.25 * 2330.0 * 1e-15, rel=1e-14)


def test_effective_mass_two_cells():
    shape = ModeShape(np.zeros((2, 3)), np.array([1.0, 0.0]), np.array([2.0, 5.0]), np.array([1.0, 1.0]))
    assert effective_mass(shape) == 2.0


def test_effective_mass_grid_refinement():
    # midpoint rule on sin(pi x) over [0, 1]: exact value rho / 2, error O(h^2)
    def mass(n):
        x = (np.arange(n) + 0.5) / n
        return effective_mass(ModeShape(np.c_[x, 0 * x, 0 * x], np.sin(np.pi * x), np.ones(n), np.full(n, 1 / n)))

    coarse, fine = mass(100), mass(200)
    assert abs(fine - coarse) < 1e-4
    assert fine == pytest.approx(0.5, abs=1e-5)


def test_mode_shape_csv(tmp_path):
    p = tmp_path / "shape.csv"
    p.write_text("x,y,z,phi,rho,dv\n0,0,0,1,2,1\n1,0,0,0,5,1\n")
    assert effective_mass(ModeShape.from_csv(p)) == 2.0


def test_mode_shape_rejects_bad_input(tmp_path):
    with pytest.raises(ModelError):
        ModeShape(np.zeros((0, 3)), np.zeros(0), np.zeros(0), np.zeros(0))
    with pytest.raises(ModelError):
        ModeShape(np.zeros((1, 3)), np.ones(1), np.ones(1), np.zeros(1))
    p = tmp_path / "empty.csv"
    p.write_text("x,y,z,phi,rho,dv\n")
    with pytest.raises(ModelError):
        ModeShape.from_csv(p)


# -- force calibration -----------------------------------------------------------------


def test_force_calibration_identity():
    w = 123.0
    mode = ModeParams(f=w / (2 * math.pi), Q=w, m_eff=1.0)
    assert force_calibration(0.7, 0.7, mode, 1.0) == pytest.approx(1.0, rel=1e-14)


def test_force_calibration_unit_values():
    mode = ModeParams(f=10 / (2 * math.pi), Q=100, m_eff=1.0)
    assert force_calibration(1.0, 2.0, mode, 1.0) == pytest.approx(20.0, rel=1e-14)


def test_force_calibration_linear_in_drive():
    b = [force_calibration(a, 3e-4 * a, MODE1, 2.5) for a in (0.1, 0.2, 0.4)]
    np.testing.assert_allclose(b, b[0], rtol=1e-14)


@pytest.mark.parametrize("A_in,C_m", [(0.0, 1.0), (1.0, 0.0)])
def test_force_calibration_preconditions(A_in, C_m):
    with pytest.raises(ModelError):
        force_calibration(A_in, 1.0, MODE1, C_m)
