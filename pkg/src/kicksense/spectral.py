"""PSD estimation, innovation whiteness testing and kick-ensemble statistics."""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal

DEFAULT_SEGMENT = 1 << 16
DEFAULT_OVERLAP = 0.5
DEFAULT_WINDOW = "hann"
# Flatness is judged on shorter segments so that the per-bin chi-square
# scatter stays well inside the tolerance band.
WHITENESS_SEGMENT = 4096
WHITENESS_BAND = (10e3, 130e3)
WHITENESS_LAGS = 100


class SpectralError(ValueError):
    pass


@dataclass(frozen=True)
class PsdEstimate:
    freqs: np.ndarray
    values: np.ndarray
    segment_length: int
    overlap: float
    window: str

    @property
    def df(self) -> float:
        return float(self.freqs[1] - self.freqs[0])

    def power(self) -> float:
        """Integrated power ``sum(values) * df``."""
        return float(np.sum(self.values) * self.df)

    def band_power(self, f_lo: float, f_hi: float) -> float:
        sel = (self.freqs >= f_lo) & (self.freqs <= f_hi)
        return float(np.sum(self.values[sel]) * self.df)

    def at(self, f: float) -> float:
        """Value in the bin nearest ``f``."""
        return float(self.values[np.argmin(np.abs(self.freqs - f))])

    def peak_near(self, f: float, rel_width: float = 0.02) -> float:
        """Largest value within ``f * (1 +- rel_width)``."""
        sel = np.abs(self.freqs - f) <= rel_width * f
        if not sel.any():
            return self.at(f)
        return float(self.values[sel].max())

    def to_csv(self, path, header_comment: str | None = None) -> None:
        with Path(path).open("w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["freq_hz", "psd"])
            for f, v in zip(self.freqs, self.values):
                w.writerow([repr(float(f)), repr(float(v))])


def welch_psd(
    x,
    f_s: float,
    segment_length: int = DEFAULT_SEGMENT,
    overlap: float = DEFAULT_OVERLAP,
    window: str = DEFAULT_WINDOW,
) -> PsdEstimate:
    """One-sided Welch PSD with density scaling (``sum(values) * df`` ~ variance).

    The mean is removed per segment.
    """
    x = np.asarray(x, dtype=float).ravel()
    if x.size == 0:
        raise SpectralError("empty signal")
    if not f_s > 0:
        raise SpectralError("f_s must be positive")
    if segment_length > x.size:
        raise SpectralError(f"segment length {segment_length} exceeds signal length {x.size}")
    if not 0 <= overlap < 1:
        raise SpectralError("overlap must be in [0, 1)")
    noverlap = int(round(overlap * segment_length))
    f, p = signal.welch(
        x, fs=f_s, window=window, nperseg=segment_length, noverlap=noverlap,
        detrend="constant", scaling="density", return_onesided=True,
    )
    return PsdEstimate(freqs=f, values=p, segment_length=int(segment_length), overlap=float(overlap), window=window)


def autocorrelation(x, max_lag: int) -> np.ndarray:
    """Normalized sample autocorrelation at lags ``0..max_lag`` (biased estimator)."""
    x = np.asarray(x, dtype=float).ravel()
    x = x - x.mean()
    n = x.size
    nfft = 1 << int(np.ceil(np.log2(2 * n)))
    spec = np.fft.rfft(x, nfft)
    acf = np.fft.irfft(spec * np.conj(spec), nfft)[: max_lag + 1]
    if acf[0] == 0:
        return np.zeros(max_lag + 1)
    return acf / acf[0]


@dataclass(frozen=True)
class WhitenessResult:
    passed: bool
    max_abs_autocorr: float
    flatness_db: float
    fraction_within: float
    autocorr: np.ndarray
    psd: PsdEstimate

    def __iter__(self):
        # unpacks as (pass, max_abs_autocorr, flatness_db)
        return iter((self.passed, self.max_abs_autocorr, self.flatness_db))


def whiteness_test(
    innovations,
    f_s: float = 1e6,
    band: tuple[float, float] = WHITENESS_BAND,
    lags: int = WHITENESS_LAGS,
    flat_db: float = 3.0,
    min_fraction: float = 0.95,
    segment_length: int = WHITENESS_SEGMENT,
) -> WhitenessResult:
    """Check an innovation sequence for whiteness.

    Passes when at least ``min_fraction`` of the normalized autocorrelations
    at lags ``1..lags`` lie within ``+-3/sqrt(N)`` and the Welch PSD stays
    within ``+-flat_db`` of its band mean over ``band``. The PSD segment
    length is capped so that at least about 100 segments are averaged.
    """
    e = np.asarray(innovations, dtype=float).ravel()
    N = e.size
    if N < 10_000:
        raise SpectralError(f"whiteness test needs at least 1e4 samples, got {N}")
    if band[1] > f_s / 2:
        raise SpectralError("band extends beyond the Nyquist frequency")
    rho = autocorrelation(e, lags)[1:]
    limit = 3.0 / np.sqrt(N)
    frac = float(np.mean(np.abs(rho) <= limit))
    # at least ~100 segments, otherwise chi-square scatter alone spans +-3 dB
    seg = min(segment_length, 1 << int(np.floor(np.log2(N / 100))))
    psd = welch_psd(e, f_s, seg)
    sel = (psd.freqs >= band[0]) & (psd.freqs <= band[1])
    vals = psd.values[sel]
    flat = float(np.max(np.abs(10.0 * np.log10(vals / vals.mean()))))
    passed = frac >= min_fraction and flat <= flat_db
    return WhitenessResult(
        passed=bool(passed), max_abs_autocorr=float(np.max(np.abs(rho))), flatness_db=flat,
        fraction_within=frac, autocorr=rho, psd=psd,
    )


@dataclass(frozen=True)
class GroupStats:
    magnitude: float
    mean: float
    std: float
    n: int

    @property
    def sem(self) -> float:
        return self.std / np.sqrt(self.n) if self.n > 0 else float("nan")


@dataclass(frozen=True)
class EnsembleStats:
    groups: tuple[GroupStats, ...]
    slope: float
    intercept: float

    def to_csv(self, path, header_comment: str | None = None) -> None:
        with Path(path).open("w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["magnitude", "mean", "std", "n"])
            for g in self.groups:
                w.writerow([repr(g.magnitude), repr(g.mean), repr(g.std), g.n])


def ensemble_stats(applied, estimated) -> EnsembleStats:
    """Per-magnitude mean and unbiased std, plus a least-squares line of estimated vs applied.

    Samples are grouped by exact value of ``applied``; at least two groups
    are needed for the regression.
    """
    applied = np.asarray(applied, dtype=float).ravel()
    estimated = np.asarray(estimated, dtype=float).ravel()
    if applied.shape != estimated.shape:
        raise SpectralError("applied and estimated must have equal length")
    buckets: dict[float, list[float]] = defaultdict(list)
    for a, e in zip(applied, estimated):
        buckets[float(a)].append(float(e))
    if len(buckets) < 2:
        raise SpectralError("regression needs at least two magnitude groups")
    groups = []
    for mag in sorted(buckets):
        vals = np.array(buckets[mag])
        std = float(np.std(vals, ddof=1)) if vals.size > 1 else float("nan")
        groups.append(GroupStats(magnitude=mag, mean=float(vals.mean()), std=std, n=int(vals.size)))
    slope, intercept = np.polyfit(applied, estimated, 1)
    return EnsembleStats(groups=tuple(groups), slope=float(slope), intercept=float(intercept))


__all__ = [
    "EnsembleStats",
    "GroupStats",
    "PsdEstimate",
    "SpectralError",
    "WhitenessResult",
    "autocorrelation",
    "ensemble_stats",
    "welch_psd",
    "whiteness_test",
]
