import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kicksense.spectral import (
    SpectralError,
    autocorrelation,
    ensemble_stats,
    welch_psd,
    whiteness_test,
)

F_S = 1e6


def test_white_noise_level():
    sigma = 2.0
    x = np.random.default_rng(0).normal(0.0, sigma, 1 << 20)
    est = welch_psd(x, F_S, segment_length=4096)
    band = est.values[(est.freqs > 10e3) & (est.freqs < 400e3)]
    assert band.mean() == pytest.approx(sigma**2 / (F_S / 2), rel=0.05)


def test_sine_power():
    t = np.arange(1 << 18) / F_S
    est = welch_psd(np.sin(2 * np.pi * 23.05e3 * t), F_S, segment_length=8192)
    assert est.band_power(22e3, 24e3) == pytest.approx(0.5, rel=0.02)
    assert est.freqs[np.argmax(est.values)] == pytest.approx(23.05e3, abs=est.df)


def test_zero_signal():
    est = welch_psd(np.zeros(4096), F_S, segment_length=1024)
    assert not est.values.any()
    assert not autocorrelation(np.zeros(100), 5).any()


def test_parseval():
    x = np.random.default_rng(1).standard_normal(1 << 18)
    x = np.convolve(x, [1.0, 0.7, 0.2], mode="same")
    est = welch_psd(x, F_S, segment_length=4096)
    assert est.power() == pytest.approx(np.var(x), rel=0.03)


def test_welch_validation():
    with pytest.raises(SpectralError):
        welch_psd([], F_S)
    with pytest.raises(SpectralError):
        welch_psd(np.ones(100), F_S, segment_length=256)
    with pytest.raises(SpectralError):
        welch_psd(np.ones(100), 0.0, segment_length=64)
    with pytest.raises(SpectralError):
        welch_psd(np.ones(100), F_S, segment_length=64, overlap=1.0)


def test_psd_csv(tmp_path):
    est = welch_psd(np.random.default_rng(2).standard_normal(2048), F_S, segment_length=256)
    est.to_csv(tmp_path / "p.csv", header_comment="seed=2")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "# seed=2" and lines[1] == "freq_hz,psd"
    assert len(lines) == 2 + est.freqs.size
    np.testing.assert_array_equal([float(v) for v in lines[2].split(",")], [est.freqs[0], est.values[0]])


def test_autocorrelation_of_ar1():
    rng = np.random.default_rng(3)
    a, n = 0.6, 200_000
    e = rng.standard_normal(n)
    x = np.empty(n)
    x[0] = e[0]
    for k in range(1, n):
        x[k] = a * x[k - 1] + e[k]
    rho = autocorrelation(x, 4)
    np.testing.assert_allclose(rho, a ** np.arange(5), atol=0.01)


def test_iid_sequence_is_white():
    res = whiteness_test(np.random.default_rng(4).standard_normal(1 << 18))
    passed, max_rho, flat = res
    assert passed
    assert res.fraction_within >= 0.95
    assert flat <= 3.0
    assert max_rho == res.max_abs_autocorr


def test_ar1_is_not_white():
    rng = np.random.default_rng(5)
    e = rng.standard_normal(1 << 18)
    x = np.empty_like(e)
    x[0] = e[0]
    for k in range(1, e.size):
        x[k] = 0.9 * x[k - 1] + e[k]
    res = whiteness_test(x)
    assert not res.passed
    assert res.fraction_within < 0.5
    assert res.flatness_db > 3.0


def test_whiteness_validation():
    with pytest.raises(SpectralError):
        whiteness_test(np.ones(100))
    with pytest.raises(SpectralError):
        whiteness_test(np.random.default_rng(0).standard_normal(20_000), f_s=2e5)


# -- ensemble statistics ---------------------------------------------------------------


def test_identical_estimates_have_zero_spread():
    s = ensemble_stats([1.0] * 5 + [2.0] * 5, [3.0] * 5 + [4.0] * 5)
    assert [g.std for g in s.groups] == [0.0, 0.0]
    assert [g.mean for g in s.groups] == [3.0, 4.0]
    assert s.groups[0].sem == 0.0


def test_exact_estimates_give_unit_line():
    a = np.repeat([0.0, 1e-6, 2e-6, 4e-6], 10)
    s = ensemble_stats(a, a)
    assert s.slope == pytest.approx(1.0, abs=1e-12)
    assert s.intercept == pytest.approx(0.0, abs=1e-18)


def test_linear_offset_recovered():
    a = np.repeat([1.0, 2.0, 3.0], 4)
    s = ensemble_stats(a, 2.0 * a + 0.5)
    assert s.slope == pytest.approx(2.0, rel=1e-12)
    assert s.intercept == pytest.approx(0.5, rel=1e-12)


def test_single_group_rejected():
    with pytest.raises(SpectralError):
        ensemble_stats([1.0, 1.0], [1.0, 2.0])
    with pytest.raises(SpectralError):
        ensemble_stats([1.0, 2.0], [1.0])


def test_singleton_group_std_is_nan():
    s = ensemble_stats([1.0, 2.0, 2.0], [1.0, 2.0, 2.2])
    assert np.isnan(s.groups[0].std)
    assert s.groups[1].std == pytest.approx(np.std([2.0, 2.2], ddof=1))


@settings(max_examples=30)
@given(st.integers(0, 2**31 - 1))
def test_stats_invariant_under_permutation(seed):
    rng = np.random.default_rng(seed)
    a = np.repeat([0.0, 1.0, 3.0], 7)
    e = a + rng.standard_normal(a.size)
    p = rng.permutation(a.size)
    s1, s2 = ensemble_stats(a, e), ensemble_stats(a[p], e[p])
    assert s1.slope == pytest.approx(s2.slope, rel=1e-12, abs=1e-12)
    assert s1.intercept == pytest.approx(s2.intercept, rel=1e-12, abs=1e-12)
    for g1, g2 in zip(s1.groups, s2.groups):
        assert g1.magnitude == g2.magnitude and g1.n == g2.n
        assert g1.mean == pytest.approx(g2.mean, rel=1e-12, abs=1e-15)
        assert g1.std == pytest.approx(g2.std, rel=1e-12)


def test_ensemble_csv(tmp_path):
    s = ensemble_stats([1.0, 1.0, 2.0, 2.0], [1.0, 1.5, 2.0, 2.5])
    s.to_csv(tmp_path / "s.csv", header_comment="x")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[1] == "magnitude,mean,std,n"
    assert lines[2].split(",")[0] == "1.0" and lines[2].split(",")[3] == "2"
