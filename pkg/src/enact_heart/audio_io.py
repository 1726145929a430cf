"""WAV decoding and sample-rate conversion.

Everything downstream works on mono float64 buffers at
:data:`CANONICAL_RATE` Hz.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import signal

from .errors import EmptyPayload, MalformedHeader, UnsupportedEncoding

CANONICAL_RATE = 4000

_FORMAT_PCM = 0x0001
_FORMAT_FLOAT = 0x0003
_FORMAT_EXTENSIBLE = 0xFFFE

# Kaiser-windowed sinc, 32 taps per polyphase branch.
_KAISER_BETA = 8.0
_TAPS_PER_BRANCH = 32


@dataclass(frozen=True)
class RawRecording:
    samples: np.ndarray
    sample_rate: int
    source_path: str = ""

    def __post_init__(self):
        if len(self.samples) == 0:
            raise EmptyPayload(f"{self.source_path or '<memory>'}: no samples")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def _chunks(data: bytes):
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8 : pos + 8 + size]
        yield cid, body
        pos += 8 + size + (size & 1)


def decode_wav(data: bytes, source_path: str = "") -> RawRecording:
    """Decode a RIFF/WAVE byte string (PCM16 or float32) into a mono recording.

    Channels are averaged. PCM16 is scaled by 1/32768.
    """
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedHeader(f"{source_path or '<bytes>'}: not a RIFF/WAVE container")

    fmt = None
    payload = None
    for cid, body in _chunks(data):
        if cid == b"fmt ":
            if len(body) < 16:
                raise MalformedHeader(f"{source_path}: truncated fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
            if fmt[0] == _FORMAT_EXTENSIBLE:
                if len(body) < 40:
                    raise MalformedHeader(f"{source_path}: truncated extensible fmt chunk")
                subformat = struct.unpack_from("<H", body, 24)[0]
                fmt = (subformat,) + fmt[1:]
        elif cid == b"data":
            payload = body
    if fmt is None or payload is None:
        raise MalformedHeader(f"{source_path or '<bytes>'}: missing fmt or data chunk")

    tag, channels, rate, _, _, bits = fmt
    if channels < 1 or rate < 1:
        raise MalformedHeader(f"{source_path}: channels={channels} rate={rate}")
    if tag == _FORMAT_PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif tag == _FORMAT_FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise UnsupportedEncoding(
            f"{source_path or '<bytes>'}: format tag {tag:#06x} with {bits} bits"
        )

    frame_bytes = dtype.itemsize * channels
    n_frames = len(payload) // frame_bytes
    if n_frames == 0:
        raise EmptyPayload(f"{source_path or '<bytes>'}: zero data frames")
    raw = np.frombuffer(payload[: n_frames * frame_bytes], dtype=dtype)
    frames = raw.reshape(n_frames, channels).astype(np.float64) * scale
    samples = frames[:, 0] if channels == 1 else frames.mean(axis=1)
    return RawRecording(samples=samples, sample_rate=int(rate), source_path=source_path)


def read_wav(path) -> RawRecording:
    path = Path(path)
    return decode_wav(path.read_bytes(), source_path=str(path))


def encode_wav(samples, sample_rate: int, channels: int = 1) -> bytes:
    """Encode samples as a PCM16 WAV byte string.

    ``samples`` is ``[n]`` for mono or ``[n, channels]``. Values are clipped
    to the representable range before quantization.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    channels = x.shape[1]
    q = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    payload = q.tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF",
        36 + len(payload),
        b"WAVE",
        b"fmt ",
        16,
        _FORMAT_PCM,
        channels,
        sample_rate,
        sample_rate * channels * 2,
        channels * 2,
        16,
        b"data",
        len(payload),
    )
    return header + payload


def _kernel(up: int, down: int) -> np.ndarray:
    max_rate = max(up, down)
    half_len = _TAPS_PER_BRANCH * max_rate // 2
    return signal.firwin(2 * half_len + 1, 1.0 / max_rate, window=("kaiser", _KAISER_BETA))


def resample(rec: RawRecording, target_rate: int = CANONICAL_RATE) -> RawRecording:
    """Polyphase windowed-sinc resampling to ``target_rate``.

    Output length is ``round(n * target / source)``. Matching rates return
    the input buffer untouched.
    """
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if target_rate == rec.sample_rate:
        return rec
    ratio = Fraction(target_rate, rec.sample_rate)
    up, down = ratio.numerator, ratio.denominator
    n_out = int(round(len(rec.samples) * target_rate / rec.sample_rate))
    n_out = max(n_out, 1)
    y = signal.resample_poly(rec.samples, up, down, window=_kernel(up, down))
    if len(y) >= n_out:
        y = y[:n_out]
    else:
        y = np.concatenate([y, np.zeros(n_out - len(y))])
    return RawRecording(samples=y, sample_rate=target_rate, source_path=rec.source_path)


def load(path, target_rate: int = CANONICAL_RATE) -> RawRecording:
    """Read a WAV file and bring it to ``target_rate``."""
    return resample(read_wav(path), target_rate)
