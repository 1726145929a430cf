"""Static two-expert mixture: P = w_vit * P_vit + (1 - w_vit) * P_cnn."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import EmptyValidation, LengthMismatch
from .manifest import Label

GRID_STEPS = 20  # w_vit = k / 20, k = 0..20


@dataclass(frozen=True)
class EnsembleWeights:
    k: int

    def __post_init__(self):
        if not 0 <= self.k <= GRID_STEPS:
            raise ValueError(f"grid index must be in [0, {GRID_STEPS}], got {self.k}")

    @property
    def w_vit(self) -> float:
        return self.k / GRID_STEPS

    @property
    def w_cnn(self) -> float:
        return 1.0 - self.w_vit

    @classmethod
    def grid(cls) -> list["EnsembleWeights"]:
        return [cls(k) for k in range(GRID_STEPS + 1)]


def fuse(p_vit, p_cnn, w: EnsembleWeights) -> np.ndarray:
    """Convex combination of two probability vectors (or row-stacked batches)."""
    return w.w_vit * np.asarray(p_vit, dtype=np.float64) + w.w_cnn * np.asarray(p_cnn, dtype=np.float64)


def classify(p_vit, p_cnn, w: EnsembleWeights):
    """Argmax of the fused distribution; ties go to the lowest label ordinal."""
    fused = fuse(p_vit, p_cnn, w)
    idx = fused.argmax(axis=-1)
    if np.ndim(idx) == 0:
        return Label(int(idx))
    return idx


@dataclass(frozen=True)
class SweepRow:
    k: int
    w_vit: float
    accuracy: float


@dataclass(frozen=True)
class SweepResult:
    best: EnsembleWeights
    table: list[SweepRow]
    metric: str = "accuracy"

    @property
    def best_accuracy(self) -> float:
        return self.table[self.best.k].accuracy

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "w_vit", "val_accuracy"])
        for row in self.table:
            w.writerow([row.k, f"{row.w_vit:.2f}", f"{row.accuracy:.10f}"])
        return buf.getvalue()


def _macro_f1(labels: np.ndarray, pred: np.ndarray) -> float:
    from .metrics import confusion, report

    return report(confusion(labels, pred)).macro_f1


def sweep(val_preds_vit, val_preds_cnn, val_labels, metric: str = "accuracy") -> SweepResult:
    """Score all 21 grid weights on validation data; ties pick the smallest k.

    ``metric`` is ``"accuracy"`` or ``"macro_f1"``; the table always reports
    plain accuracy.
    """
    pv = np.asarray(val_preds_vit, dtype=np.float64)
    pc = np.asarray(val_preds_cnn, dtype=np.float64)
    y = np.asarray(val_labels, dtype=np.int64)
    if not (len(pv) == len(pc) == len(y)):
        raise LengthMismatch(f"ViT {len(pv)}, CNN {len(pc)}, labels {len(y)}")
    if len(y) == 0:
        raise EmptyValidation("no validation items to sweep over")
    if metric not in ("accuracy", "macro_f1"):
        raise ValueError(f"unknown selection metric {metric!r}")

    table = []
    scores = []
    for w in EnsembleWeights.grid():
        pred = fuse(pv, pc, w).argmax(axis=1)
        acc = float(np.mean(pred == y))
        table.append(SweepRow(w.k, w.w_vit, acc))
        scores.append(acc if metric == "accuracy" else _macro_f1(y, pred))
    best_k = int(np.argmax(scores))  # first maximum = smallest k
    result = SweepResult(EnsembleWeights(best_k), table, metric)
    if metric == "accuracy":
        assert result.best_accuracy >= max(table[0].accuracy, table[-1].accuracy)
    return result
