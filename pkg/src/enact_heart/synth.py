"""Deterministic synthetic heart sounds for the five classes.

All class evidence sits below 195 Hz so it survives the low-pass stage:

* normal: S1 (60 Hz, 80 ms) and S2 (90 Hz, 60 ms) damped bursts per cycle
* murmur: normal plus 120-180 Hz noise filling the S1 -> S2 gap
* extrahls: normal plus a 70 Hz burst shortly after S2
* extrastole: normal with every 4th cycle skipped or doubled by a premature beat
* artifact: pink noise with random transients, no cardiac rhythm

The timing stream depends only on the seed, so two classes generated with
the same seed share their S1/S2 schedule.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal

from .audio_io import CANONICAL_RATE, RawRecording, encode_wav
from .manifest import Label

S1_HZ, S1_SEC = 60.0, 0.080
S2_HZ, S2_SEC = 90.0, 0.060
S3_HZ, S3_SEC = 70.0, 0.050
MURMUR_BAND = (120.0, 180.0)
JITTER_SEC = 0.010
BACKGROUND_STD = 0.005


@dataclass(frozen=True)
class SynthSpec:
    label: Label
    bpm: float = 72.0
    duration: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if not 40 <= self.bpm <= 180:
            raise ValueError(f"bpm must be in [40, 180], got {self.bpm}")
        if not 1 <= self.duration <= 30:
            raise ValueError(f"duration must be in [1, 30] s, got {self.duration}")


def _burst(freq: float, dur: float, rate: int, phase: float = 0.0) -> np.ndarray:
    t = np.arange(int(round(dur * rate))) / rate
    env = np.sin(np.pi * t / dur) * np.exp(-3.0 * t / dur)
    return env / env.max() * np.sin(2 * np.pi * freq * t + phase)


def _place(out: np.ndarray, wave: np.ndarray, t_sec: float, rate: int, gain: float) -> None:
    start = int(round(t_sec * rate))
    if start >= len(out) or start + len(wave) <= 0:
        return
    lo = max(start, 0)
    hi = min(start + len(wave), len(out))
    out[lo:hi] += gain * wave[lo - start : hi - start]


def _band_noise(rng: np.random.Generator, n: int, band: tuple[float, float], rate: int) -> np.ndarray:
    sos = signal.butter(4, band, btype="bandpass", fs=rate, output="sos")
    x = signal.sosfilt(sos, rng.standard_normal(n + 400))[400:]
    return x / (np.std(x) + 1e-12)


def _pink_noise(rng: np.random.Generator, n: int) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(len(spec), dtype=np.float64)
    f[0] = 1.0
    x = np.fft.irfft(spec / np.sqrt(f), n)
    return x / (np.std(x) + 1e-12)


@dataclass(frozen=True)
class Beat:
    s1: float
    s2: float


def beat_schedule(spec: SynthSpec, rng: np.random.Generator) -> tuple[list[Beat], float, int]:
    """Jittered S1/S2 times. Returns (beats, period, extrastole phase)."""
    period = 60.0 / spec.bpm
    systole = 0.1 + 0.2 * period
    offset = rng.uniform(0.05, 0.3) * period
    phase = int(rng.integers(0, 3))  # perturbed beats start at index 1..3, never the first
    beats = []
    i = 0
    while True:
        t = offset + i * period + rng.uniform(-JITTER_SEC, JITTER_SEC)
        if t >= spec.duration:
            break
        beats.append(Beat(t, t + systole + rng.uniform(-JITTER_SEC, JITTER_SEC)))
        i += 1
    return beats, period, phase


def generate(spec: SynthSpec, rate: int = CANONICAL_RATE) -> RawRecording:
    n = int(round(spec.duration * rate))
    timing = np.random.default_rng([spec.seed, 0])
    extra = np.random.default_rng([spec.seed, 1, int(spec.label)])
    out = BACKGROUND_STD * extra.standard_normal(n)

    if spec.label is Label.ARTIFACT:
        out += extra.uniform(0.08, 0.18) * _pink_noise(extra, n)
        for _ in range(int(extra.integers(3, 12))):
            wave = _burst(extra.uniform(20, 180), extra.uniform(0.01, 0.12), rate, extra.uniform(0, 2 * np.pi))
            _place(out, wave, extra.uniform(0, spec.duration), rate, extra.uniform(0.2, 0.6))
        return _finish(out, rate, spec)

    beats, period, phase = beat_schedule(spec, timing)
    s1_gain = timing.uniform(0.5, 0.8)
    s2_gain = timing.uniform(0.35, 0.6)
    murmur_gain = extra.uniform(0.1, 0.25)
    s3_delay = extra.uniform(0.10, 0.15)
    s1_wave, s2_wave = _burst(S1_HZ, S1_SEC, rate), _burst(S2_HZ, S2_SEC, rate)

    for i, b in enumerate(beats):
        perturbed = spec.label is Label.EXTRASTOLE and (i + phase) % 4 == 3
        if perturbed and extra.random() < 0.5:
            continue  # skipped beat
        g1 = s1_gain * timing.uniform(0.9, 1.1)
        g2 = s2_gain * timing.uniform(0.9, 1.1)
        _place(out, s1_wave, b.s1, rate, g1)
        _place(out, s2_wave, b.s2, rate, g2)
        if perturbed:
            # premature beat in mid-diastole
            t = b.s1 + (b.s2 - b.s1) + 0.45 * (period - (b.s2 - b.s1))
            _place(out, s1_wave, t, rate, 0.9 * g1)
            _place(out, s2_wave, t + 0.6 * (b.s2 - b.s1), rate, 0.9 * g2)
        if spec.label is Label.EXTRAHLS:
            _place(out, _burst(S3_HZ, S3_SEC, rate), b.s2 + s3_delay, rate, 0.8 * g2)
        if spec.label is Label.MURMUR:
            start = b.s1 + S1_SEC
            length = b.s2 - start
            if length > 0.02:
                m = int(round(length * rate))
                noise = _band_noise(extra, m, MURMUR_BAND, rate) * np.hanning(m)
                _place(out, noise, start, rate, murmur_gain)
    return _finish(out, rate, spec)


def _finish(out: np.ndarray, rate: int, spec: SynthSpec) -> RawRecording:
    peak = np.max(np.abs(out))
    if peak > 0.95:
        out *= 0.95 / peak
    return RawRecording(out, rate, source_path=f"synth:{spec.label.slug}:{spec.seed}")


def corpus_specs(per_class: int, seed: int = 42, duration: float = 5.0,
                 bpm_range: tuple[float, float] = (60.0, 100.0)) -> list[tuple[str, SynthSpec]]:
    """Deterministic (filename, spec) list; filenames carry the label prefix."""
    rng = np.random.default_rng(seed)
    out = []
    for label in Label:
        for i in range(per_class):
            bpm = float(np.round(rng.uniform(*bpm_range), 2))
            rec_seed = int(rng.integers(0, 2**31 - 1))
            out.append((f"{label.slug}__{i:04d}.wav", SynthSpec(label, bpm, duration, rec_seed)))
    return out


def write_corpus(out_dir, per_class: int, seed: int = 42, duration: float = 5.0) -> Path:
    """Write WAV files into ``set_a``/``set_b`` plus ``ground_truth.csv``."""
    from .io_util import atomic_write_bytes, atomic_write_text

    out_dir = Path(out_dir)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["path", "label", "bpm", "duration", "seed"])
    for n, (name, spec) in enumerate(corpus_specs(per_class, seed, duration)):
        folder = "set_a" if n % 2 == 0 else "set_b"
        rel = f"{folder}/{name}"
        wav = encode_wav(generate(spec).samples, CANONICAL_RATE)
        atomic_write_bytes(out_dir / rel, wav)
        w.writerow([rel, spec.label.slug, f"{spec.bpm:.2f}", f"{spec.duration:g}", spec.seed])
    atomic_write_text(out_dir / "ground_truth.csv", buf.getvalue())
    return out_dir
