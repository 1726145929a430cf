"""Rasterize spectrograms and centroid graphs into [0, 1] grayscale images."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .dsp import CentroidSeries, Spectrogram, StftParams
from .errors import LengthMismatch

IMAGE_SIZE = 64
DB_RANGE = 80.0
MAX_BIN = 24  # 0..187.5 Hz at 4000 Hz / 512 bins
WAVE_INTENSITY = 0.5
CENTROID_INTENSITY = 1.0


class Modality(enum.Enum):
    SPECTROGRAM = "spectrogram"
    CENTROID = "centroid"


@dataclass(frozen=True)
class FeatureImage:
    pixels: np.ndarray  # [H, W] float32 in [0, 1]
    modality: Modality
    clip_id: str = ""

    def __post_init__(self):
        if self.pixels.ndim != 2:
            raise ValueError(f"expected a 2-D raster, got shape {self.pixels.shape}")

    def to_pgm(self) -> bytes:
        h, w = self.pixels.shape
        data = np.round(np.clip(self.pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
        return f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes()

    def filename(self) -> str:
        return f"{self.clip_id}_{self.modality.value}.pgm"


def _interp_axis(a: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    """Linear resampling along ``axis`` with end points aligned."""
    n_in = a.shape[axis]
    if n_in == 1:
        return np.repeat(a, n_out, axis=axis)
    pos = np.linspace(0.0, n_in - 1, n_out)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    a0 = np.take(a, lo, axis=axis)
    a1 = np.take(a, lo + 1, axis=axis)
    shape = [1] * a.ndim
    shape[axis] = n_out
    frac = frac.reshape(shape)
    return a0 * (1.0 - frac) + a1 * frac


def bilinear_resize(a: np.ndarray, height: int, width: int) -> np.ndarray:
    return _interp_axis(_interp_axis(a, height, 0), width, 1)


def normalized_db(magnitudes: np.ndarray, db_range: float = DB_RANGE) -> np.ndarray:
    """Map magnitudes to [0, 1]: peak -> 1, ``db_range`` below peak (or less) -> 0.

    Levels are taken relative to the peak before the logarithm, so a global
    gain on the input cancels exactly whenever that gain is exact in floating
    point. All-zero input maps to all zeros.
    """
    peak = float(magnitudes.max()) if magnitudes.size else 0.0
    if peak <= 0.0:
        return np.zeros(magnitudes.shape)
    floor = 10.0 ** (-db_range / 20.0)
    rel = np.maximum(magnitudes / peak, floor)
    return (20.0 * np.log10(rel) + db_range) / db_range


def render_spectrogram(
    spec: Spectrogram,
    size: int = IMAGE_SIZE,
    max_bin: int = MAX_BIN,
    db_range: float = DB_RANGE,
    clip_id: str = "",
) -> FeatureImage:
    if spec.magnitudes.size == 0:
        raise ValueError("empty spectrogram")
    levels = normalized_db(spec.magnitudes, db_range)[:, : max_bin + 1]
    # rows = frequency, highest first; columns = time
    raster = levels.T[::-1]
    pixels = np.clip(bilinear_resize(raster, size, size), 0.0, 1.0)
    return FeatureImage(pixels.astype(np.float32), Modality.SPECTROGRAM, clip_id)


def _columns(n: int, width: int) -> np.ndarray:
    """Column of each of ``n`` points when spread linearly across ``width``."""
    if n == 1:
        return np.zeros(1, dtype=int)
    return np.round(np.arange(n) * ((width - 1) / (n - 1))).astype(int)


def draw_polyline(canvas: np.ndarray, rows: np.ndarray, intensity: float) -> None:
    """Rasterize points spread evenly over the canvas width.

    Every column gets a vertical run covering all of its points' rows plus
    the rows of the last point of the previous column, so consecutive
    points are joined without gaps. No anti-aliasing.
    """
    height, width = canvas.shape
    rows = np.clip(rows, 0, height - 1)
    cols = _columns(len(rows), width)
    lo = np.full(width, height, dtype=int)
    hi = np.full(width, -1, dtype=int)
    np.minimum.at(lo, cols, rows)
    np.maximum.at(hi, cols, rows)
    # join to the last point of the previous occupied column
    last_idx = np.searchsorted(cols, np.arange(width), side="right") - 1
    for c in range(1, width):
        if hi[c] < 0:
            continue
        j = last_idx[c - 1]
        if j >= 0:
            prev = rows[j]
            lo[c] = min(lo[c], prev)
            hi[c] = max(hi[c], prev)
    for c in range(width):
        if hi[c] >= 0:
            canvas[lo[c] : hi[c] + 1, c] = intensity


def render_centroid_graph(
    samples,
    cent: CentroidSeries,
    params: StftParams = StftParams(),
    size: int = IMAGE_SIZE,
    clip_id: str = "",
) -> FeatureImage:
    """Overlay the peak-normalized waveform and the Nyquist-normalized centroid."""
    x = np.asarray(samples, dtype=np.float64)
    if len(cent.values) != params.n_frames(len(x)):
        raise LengthMismatch(
            f"{len(cent.values)} centroid frames do not match a {len(x)}-sample clip "
            f"({params.n_frames(len(x))} frames expected)"
        )
    canvas = np.zeros((size, size))
    peak = float(np.max(np.abs(x))) if len(x) else 0.0
    wave = x / peak if peak > 0 else np.zeros_like(x)
    center = size // 2
    wave_rows = np.round(center - center * wave).astype(int)
    draw_polyline(canvas, wave_rows, WAVE_INTENSITY)

    nyquist = cent.sample_rate / 2.0
    cent_rows = np.round((size - 1) * (1.0 - np.asarray(cent.values) / nyquist)).astype(int)
    draw_polyline(canvas, cent_rows, CENTROID_INTENSITY)
    return FeatureImage(canvas.astype(np.float32), Modality.CENTROID, clip_id)
