"""Dominant-period detection from the averaged DFT amplitude spectrum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import SeriesMatrix
from .errors import DataError

# Spectrum maxima at or below this are treated as "no periodic content".
APERIODIC_EPS = 1e-12


@dataclass(frozen=True)
class PeriodProfile:
    """Averaged amplitude spectrum plus the dominant frequency bin.

    ``amplitudes[i]`` is the magnitude at frequency bin i + 1; the DC bin
    is excluded. ``period`` is ceil(T / dominant_frequency).
    """

    amplitudes: np.ndarray
    dominant_frequency: int
    period: int
    aperiodic: bool = False

    def top_bins(self, count: int = 5) -> list[tuple[int, float]]:
        """(frequency bin, amplitude) pairs, strongest first."""
        order = np.argsort(-self.amplitudes, kind="stable")[:count]
        return [(int(i) + 1, float(self.amplitudes[i])) for i in order]


def amplitude_spectrum(series: SeriesMatrix) -> np.ndarray:
    """Per-sensor DFT magnitudes for bins 1..floor(T/2), averaged over sensors."""
    if series.length < 4:
        raise DataError(f"need T >= 4 for a spectrum, got T={series.length}")
    mags = np.abs(np.fft.rfft(series.values, axis=1))
    return mags[:, 1 : series.length // 2 + 1].mean(axis=0)


def detect_period(series: SeriesMatrix) -> PeriodProfile:
    """Pick the strongest non-DC bin; ties go to the lower bin (longer period).

    A flat spectrum (constant input) falls back to period = T with
    dominant_frequency = 1 as a sentinel and the aperiodic flag set.
    """
    amps = amplitude_spectrum(series)
    if amps.max() <= APERIODIC_EPS:
        return PeriodProfile(amps, 1, series.length, aperiodic=True)
    freq = int(np.argmax(amps)) + 1
    period = (series.length + freq - 1) // freq
    return PeriodProfile(amps, freq, period)
