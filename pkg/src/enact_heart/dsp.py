"""Low-pass filtering, STFT magnitudes and spectral centroid."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal

from .audio_io import CANONICAL_RATE
from .errors import TooShort

CUTOFF_HZ = 195.0
FILTER_ORDER = 4
SILENCE_EPS = 1e-12


@dataclass(frozen=True)
class StftParams:
    fft_size: int = 512
    hop: int = 128

    def __post_init__(self):
        if self.fft_size < 2 or self.fft_size & (self.fft_size - 1):
            raise ValueError(f"fft_size must be a power of two, got {self.fft_size}")
        if not 0 < self.hop <= self.fft_size:
            raise ValueError(f"hop must be in (0, fft_size], got {self.hop}")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.fft_size:
            return 0
        return (n_samples - self.fft_size) // self.hop + 1


@dataclass(frozen=True)
class Spectrogram:
    magnitudes: np.ndarray  # [n_frames, n_bins]
    params: StftParams
    sample_rate: int

    @property
    def n_frames(self) -> int:
        return self.magnitudes.shape[0]

    def bin_frequencies(self) -> np.ndarray:
        return np.arange(self.params.n_bins) * self.sample_rate / self.params.fft_size

    def to_csv(self) -> str:
        """Debug dump: one row per frame, one column per bin."""
        freqs = self.bin_frequencies()
        lines = ["frame," + ",".join(f"{f:g}" for f in freqs)]
        for t, row in enumerate(self.magnitudes):
            lines.append(f"{t}," + ",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class CentroidSeries:
    values: np.ndarray  # Hz, one per frame
    sample_rate: int


def butterworth_sos(
    cutoff: float = CUTOFF_HZ, sample_rate: int = CANONICAL_RATE, order: int = FILTER_ORDER
) -> np.ndarray:
    """Digital Butterworth low-pass as second-order sections.

    Analog poles are placed on the unit circle, the cutoff is prewarped, and
    each conjugate pole pair becomes one biquad through the bilinear
    transform. Each section has unit gain at DC.
    """
    if order % 2:
        raise ValueError("only even orders are supported")
    k = math.tan(math.pi * cutoff / sample_rate)
    k2 = k * k
    sections = []
    for i in range(order // 2):
        # 1/(s^2 + 2 r s + 1) with r = sin((2i+1) pi / (2N))
        r = math.sin(math.pi * (2 * i + 1) / (2 * order))
        a0 = k2 + 2.0 * r * k + 1.0
        b = k2 / a0
        sections.append([b, 2.0 * b, b, 1.0, 2.0 * (k2 - 1.0) / a0, (k2 - 2.0 * r * k + 1.0) / a0])
    return np.array(sections)


def butterworth_gain(freq, cutoff: float = CUTOFF_HZ, sample_rate: int = CANONICAL_RATE,
                     order: int = FILTER_ORDER):
    """Closed-form single-pass magnitude of the bilinear Butterworth filter."""
    ratio = np.tan(np.pi * np.asarray(freq, dtype=np.float64) / sample_rate) / math.tan(
        math.pi * cutoff / sample_rate
    )
    return 1.0 / np.sqrt(1.0 + ratio ** (2 * order))


_SOS_CACHE: dict[tuple, np.ndarray] = {}


def lowpass(samples, cutoff: float = CUTOFF_HZ, sample_rate: int = CANONICAL_RATE,
            order: int = FILTER_ORDER) -> np.ndarray:
    """Zero-phase Butterworth low-pass (forward pass, then backward pass)."""
    key = (cutoff, sample_rate, order)
    sos = _SOS_CACHE.get(key)
    if sos is None:
        sos = _SOS_CACHE[key] = butterworth_sos(cutoff, sample_rate, order)
    x = np.asarray(samples, dtype=np.float64)
    # padlen=0: no edge extension, so output length equals input length and
    # the initial state scales with the edge sample (keeps the map linear).
    return signal.sosfiltfilt(sos, x, padtype=None, padlen=0)


def lowpass_195(samples) -> np.ndarray:
    return lowpass(samples, CUTOFF_HZ, CANONICAL_RATE, FILTER_ORDER)


def hann_periodic(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft_magnitude(samples, params: StftParams = StftParams(),
                   sample_rate: int = CANONICAL_RATE) -> Spectrogram:
    x = np.asarray(samples, dtype=np.float64)
    if len(x) < params.fft_size:
        raise TooShort(f"need at least {params.fft_size} samples, got {len(x)}")
    frames = sliding_window_view(x, params.fft_size)[:: params.hop]
    mags = np.abs(np.fft.rfft(frames * hann_periodic(params.fft_size), axis=1))
    return Spectrogram(magnitudes=mags, params=params, sample_rate=sample_rate)


def spectral_centroid(spec: Spectrogram) -> CentroidSeries:
    m = spec.magnitudes
    total = m.sum(axis=1)
    weighted = m @ spec.bin_frequencies()
    silent = total < SILENCE_EPS
    values = np.where(silent, 0.0, weighted / np.where(silent, 1.0, total))
    return CentroidSeries(values=values, sample_rate=spec.sample_rate)


def band_energy(spec: Spectrogram, lo: float, hi: float) -> float:
    """Sum of squared magnitudes in bins with ``lo <= f <= hi``."""
    f = spec.bin_frequencies()
    sel = (f >= lo) & (f <= hi)
    return float(np.sum(spec.magnitudes[:, sel] ** 2))
