"""Labeled dataset table: discovery, class counts, group-aware splits, CSV I/O."""

from __future__ import annotations

import csv
import enum
import io
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ClassTooSmall, DuplicatePath, UnlabeledFile


class Label(enum.IntEnum):
    ARTIFACT = 0
    EXTRAHLS = 1
    EXTRASTOLE = 2
    MURMUR = 3
    NORMAL = 4

    @property
    def slug(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, text: str) -> "Label":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown label {text!r}") from None


N_CLASSES = len(Label)


class Split(enum.Enum):
    TRAIN = "train"
    VALIDATION = "validation"


CSV_HEADER = ("clip_id", "source_path", "label", "split", "augmentation_index", "segment_index")


@dataclass(frozen=True)
class ManifestRecord:
    clip_id: str
    source_path: str
    label: Label
    split: Split = Split.TRAIN
    augmentation_index: int = 0
    segment_index: int = 0

    def __post_init__(self):
        if not 0 <= self.augmentation_index <= 9:
            raise ValueError(f"augmentation_index out of range: {self.augmentation_index}")
        if self.segment_index < 0:
            raise ValueError(f"negative segment_index: {self.segment_index}")


class Manifest(tuple):
    """Immutable ordered collection of :class:`ManifestRecord`."""

    def __new__(cls, records: Iterable[ManifestRecord] = ()):
        records = tuple(records)
        seen = set()
        for r in records:
            if r.clip_id in seen:
                raise ValueError(f"duplicate clip_id {r.clip_id!r}")
            seen.add(r.clip_id)
        return super().__new__(cls, records)

    def split(self, which: Split) -> "Manifest":
        return Manifest(r for r in self if r.split is which)

    @property
    def train(self) -> "Manifest":
        return self.split(Split.TRAIN)

    @property
    def validation(self) -> "Manifest":
        return self.split(Split.VALIDATION)

    def originals(self) -> "Manifest":
        return Manifest(r for r in self if r.augmentation_index == 0)

    def labels(self) -> np.ndarray:
        return np.array([int(r.label) for r in self], dtype=np.int64)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self:
            w.writerow(
                [r.clip_id, r.source_path, r.label.slug, r.split.value,
                 r.augmentation_index, r.segment_index]
            )
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Manifest":
        rows = csv.DictReader(io.StringIO(text))
        if tuple(rows.fieldnames or ()) != CSV_HEADER:
            raise ValueError(f"unexpected manifest header {rows.fieldnames}")
        return cls(
            ManifestRecord(
                clip_id=row["clip_id"],
                source_path=row["source_path"],
                label=Label.parse(row["label"]),
                split=Split(row["split"]),
                augmentation_index=int(row["augmentation_index"]),
                segment_index=int(row["segment_index"]),
            )
            for row in rows
        )

    def save(self, path) -> None:
        from .io_util import atomic_write_text

        atomic_write_text(path, self.to_csv())

    @classmethod
    def load(cls, path) -> "Manifest":
        return cls.from_csv(Path(path).read_text(encoding="utf-8"))


LabelRule = Callable[[Path], "Label | None"]


def filename_label_rule(path: Path) -> Label | None:
    """The label is a ``_``/``.``/``-`` separated token of the file name.

    Covers PASCAL names (``murmur__201108222238.wav``) and suffixed ones
    (``a_normal.wav``). A name carrying two different label tokens is
    treated as unlabeled.
    """
    tokens = set(re.split(r"[_.\-]+", path.stem.lower()))
    hits = [label for label in Label if label.slug in tokens]
    return hits[0] if len(hits) == 1 else None


def folder_label_rule(path: Path) -> Label | None:
    """The label is the name of the file's parent folder."""
    try:
        return Label.parse(path.parent.name)
    except ValueError:
        return None


def build_manifest(roots: Sequence, label_rule: LabelRule = filename_label_rule) -> Manifest:
    """One record per ``.wav`` file under ``roots``, ordered by path.

    Raises :class:`DuplicatePath` if the same file is reachable from two
    roots and :class:`UnlabeledFile` if ``label_rule`` returns ``None``.
    """
    found: dict[Path, Path] = {}
    for root in roots:
        root = Path(root)
        if not root.is_dir():
            raise FileNotFoundError(f"data root {root} does not exist")
        for p in root.rglob("*"):
            if not p.is_file() or p.suffix.lower() != ".wav":
                continue
            key = p.resolve()
            if key in found:
                raise DuplicatePath(f"{p} already discovered as {found[key]}")
            found[key] = p

    records = []
    used_ids: Counter = Counter()
    for p in sorted(found.values(), key=lambda q: q.as_posix()):
        label = label_rule(p)
        if label is None:
            raise UnlabeledFile(f"no label rule matches {p}")
        clip_id = p.stem
        used_ids[clip_id] += 1
        if used_ids[clip_id] > 1:
            clip_id = f"{clip_id}~{used_ids[clip_id] - 1}"
        records.append(ManifestRecord(clip_id=clip_id, source_path=p.as_posix(), label=label))
    return Manifest(records)


def class_distribution(m: Manifest) -> dict[Label, int]:
    counts = {label: 0 for label in Label}
    for r in m:
        if r.augmentation_index == 0:
            counts[r.label] += 1
    return counts


def assign_splits(
    m: Manifest,
    val_fraction: float = 0.2,
    seed: int = 0,
    drop_augmented_validation: bool = False,
) -> Manifest:
    """Stratified train/validation split at the source-recording level.

    Every clip derived from one ``source_path`` lands in the same split. Per
    class, ``round(val_fraction * n_sources)`` sources (at least one, at most
    ``n_sources - 1``) go to validation.
    """
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must lie in (0, 1), got {val_fraction}")

    sources: dict[Label, set[str]] = defaultdict(set)
    for r in m:
        sources[r.label].add(r.source_path)
    owner: dict[str, Label] = {}
    for label, paths in sources.items():
        for p in paths:
            if p in owner and owner[p] is not label:
                raise ValueError(f"{p} carries two labels")
            owner[p] = label

    rng = np.random.default_rng(seed)
    val_sources: set[str] = set()
    for label in Label:
        paths = sorted(sources.get(label, ()))
        if not paths:
            continue
        if len(paths) < 2:
            raise ClassTooSmall(
                f"class {label.slug} has {len(paths)} source recording(s); need at least 2"
            )
        n_val = min(max(int(round(val_fraction * len(paths))), 1), len(paths) - 1)
        order = rng.permutation(len(paths))
        val_sources.update(paths[i] for i in order[:n_val])

    out = []
    for r in m:
        split = Split.VALIDATION if r.source_path in val_sources else Split.TRAIN
        if drop_augmented_validation and split is Split.VALIDATION and r.augmentation_index:
            continue
        out.append(replace(r, split=split))
    return Manifest(out)
