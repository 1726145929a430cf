"""Fixed-length segmentation and Gaussian-noise augmentation."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .audio_io import CANONICAL_RATE, RawRecording
from .errors import AlreadyAugmented
from .manifest import Label

CLIP_SECONDS = 5
CLIP_SAMPLES = CLIP_SECONDS * CANONICAL_RATE  # 20000
N_VERSIONS = 10  # original + 9 noisy copies
NOISE_STD = 0.1


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    label: Label
    clip_id: str
    augmentation_index: int = 0
    segment_index: int = 0
    source_path: str = ""

    def __post_init__(self):
        if not 0 <= self.augmentation_index < N_VERSIONS:
            raise ValueError(f"augmentation_index out of range: {self.augmentation_index}")


def segment_clip_id(base_id: str, segment_index: int) -> str:
    return f"{base_id}_s{segment_index:03d}"


def version_clip_id(segment_id: str, augmentation_index: int) -> str:
    return f"{segment_id}_a{augmentation_index}"


def segment(
    rec: RawRecording,
    label: Label,
    base_id: str,
    clip_samples: int = CLIP_SAMPLES,
    sample_rate: int = CANONICAL_RATE,
) -> list[AudioClip]:
    """Cut ``rec`` into consecutive non-overlapping clips, zero-padding the tail."""
    if rec.sample_rate != sample_rate:
        raise ValueError(f"expected {sample_rate} Hz input, got {rec.sample_rate} Hz")
    x = np.asarray(rec.samples)
    n_clips = max(1, math.ceil(len(x) / clip_samples))
    padded = np.zeros(n_clips * clip_samples, dtype=x.dtype)
    padded[: len(x)] = x
    return [
        AudioClip(
            samples=padded[i * clip_samples : (i + 1) * clip_samples].copy(),
            label=label,
            clip_id=segment_clip_id(base_id, i),
            segment_index=i,
            source_path=rec.source_path,
        )
        for i in range(n_clips)
    ]


def noise_generator(seed: int, clip_id: str, version: int) -> np.random.Generator:
    """Counter-based stream keyed by (seed, clip_id, version); order independent."""
    digest = hashlib.sha256(clip_id.encode("utf-8")).digest()
    words = np.frombuffer(digest[:16], dtype="<u4").tolist()
    ss = np.random.SeedSequence([seed & 0xFFFFFFFF, seed >> 32 & 0xFFFFFFFF, *words, version])
    return np.random.Generator(np.random.Philox(ss))


def augment(
    clip: AudioClip,
    seed: int,
    n_versions: int = N_VERSIONS,
    noise_std: float = NOISE_STD,
) -> list[AudioClip]:
    """Return the original clip followed by ``n_versions - 1`` noisy copies.

    Noise is i.i.d. N(0, noise_std) and is not clipped afterwards.
    """
    if clip.augmentation_index != 0:
        raise AlreadyAugmented(f"{clip.clip_id} is already augmentation {clip.augmentation_index}")
    out = [clip]
    for i in range(1, n_versions):
        rng = noise_generator(seed, clip.clip_id, i)
        noise = rng.normal(0.0, noise_std, size=clip.samples.shape)
        out.append(
            replace(
                clip,
                samples=clip.samples + noise,
                clip_id=version_clip_id(clip.clip_id, i),
                augmentation_index=i,
            )
        )
    return out


def save_clip(samples, path) -> None:
    from .io_util import atomic_write_bytes

    atomic_write_bytes(path, np.asarray(samples, dtype="<f4").tobytes())


def load_clip(path) -> np.ndarray:
    return np.fromfile(Path(path), dtype="<f4").astype(np.float64)
