"""Run configuration: every tunable in one JSON document with dotted overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .models import CnnConfig, TrainConfig, VitConfig


@dataclass(frozen=True)
class AudioConfig:
    sample_rate: int = 4000


@dataclass(frozen=True)
class PreprocessConfig:
    clip_seconds: int = 5
    n_versions: int = 10
    noise_std: float = 0.1


@dataclass(frozen=True)
class SplitConfig:
    val_fraction: float = 0.2
    drop_augmented_validation: bool = False
    label_rule: str = "filename"  # or "folder"

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if self.label_rule not in ("filename", "folder"):
            raise ValueError(f"label_rule must be 'filename' or 'folder', got {self.label_rule!r}")


@dataclass(frozen=True)
class DspConfig:
    fft_size: int = 512
    hop: int = 128
    cutoff_hz: float = 195.0
    filter_order: int = 4
    filter_centroid: bool = True


@dataclass(frozen=True)
class RenderConfig:
    image_size: int = 64
    db_range: float = 80.0
    max_bin: int = 24
    export_pgm: bool = False


@dataclass(frozen=True)
class EnsembleConfig:
    metric: str = "accuracy"  # or "macro_f1"

    def __post_init__(self):
        if self.metric not in ("accuracy", "macro_f1"):
            raise ValueError(f"metric must be 'accuracy' or 'macro_f1', got {self.metric!r}")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    audio: AudioConfig = field(default_factory=AudioConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    dsp: DspConfig = field(default_factory=DspConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    cnn: CnnConfig = field(default_factory=CnnConfig)
    vit: VitConfig = field(default_factory=VitConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self, *sections: str) -> str:
        """Stable hash of the named sections (all of them if none are named)."""
        d = self.to_dict()
        if sections:
            d = {k: d[k] for k in sections}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.seed)


def _build(cls, data: dict[str, Any], where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}" if where else name)
        elif isinstance(default, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def from_dict(data: dict[str, Any]) -> RunConfig:
    return _build(RunConfig, data, "")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    """Apply ``section.key=value`` strings (values parsed as JSON when possible)."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        node = data
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {p} is not a section")
        node[parts[-1]] = _parse_value(value.strip())
    return data


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    data: dict[str, Any] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return from_dict(apply_overrides(data, overrides or []))


def worker_count() -> int:
    """Worker cap from ``ENACT_THREADS`` (default 1)."""
    raw = os.environ.get("ENACT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"ENACT_THREADS must be an integer, got {raw!r}") from None
