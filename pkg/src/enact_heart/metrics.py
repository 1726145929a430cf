"""Confusion matrix and per-class / averaged precision, recall and F1."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import Empty, LengthMismatch
from .manifest import N_CLASSES, Label


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # [true, predicted]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\pred"] + [lab.slug for lab in Label])
        for lab, row in zip(Label, self.counts):
            w.writerow([lab.slug] + [int(v) for v in row])
        return buf.getvalue()


def confusion(true_labels, predicted_labels, n_classes: int = N_CLASSES) -> ConfusionMatrix:
    t = np.asarray([int(v) for v in true_labels], dtype=np.int64)
    p = np.asarray([int(v) for v in predicted_labels], dtype=np.int64)
    if len(t) != len(p):
        raise LengthMismatch(f"{len(t)} true labels vs {len(p)} predictions")
    if len(t) == 0:
        raise Empty("cannot build a confusion matrix from zero items")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts)


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class MetricReport:
    per_class: dict[Label, ClassMetrics]
    accuracy: float
    macro: ClassMetrics
    weighted: ClassMetrics
    total: int
    zero_division: int = 0  # how many undefined ratios were set to 0
    confusion: ConfusionMatrix | None = field(default=None, compare=False)

    @property
    def macro_f1(self) -> float:
        return self.macro.f1

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "precision", "recall", "f1", "support"])

        def row(name, m):
            w.writerow([name, f"{m.precision:.10f}", f"{m.recall:.10f}", f"{m.f1:.10f}", m.support])

        for lab, m in self.per_class.items():
            row(lab.slug, m)
        w.writerow(["accuracy", "", "", f"{self.accuracy:.10f}", self.total])
        row("macro avg", self.macro)
        row("weighted avg", self.weighted)
        return buf.getvalue()

    def to_table(self) -> str:
        """Aligned text table: one row per class, then accuracy, macro and weighted rows."""
        lines = [f"{'':>14}{'precision':>11}{'recall':>9}{'f1-score':>10}{'support':>9}", ""]
        for lab, m in self.per_class.items():
            lines.append(f"{lab.slug:>14}{m.precision:>11.2f}{m.recall:>9.2f}{m.f1:>10.2f}{m.support:>9d}")
        lines.append("")
        lines.append(f"{'accuracy':>14}{'':>11}{'':>9}{self.accuracy:>10.2f}{self.total:>9d}")
        for name, m in (("macro avg", self.macro), ("weighted avg", self.weighted)):
            lines.append(f"{name:>14}{m.precision:>11.2f}{m.recall:>9.2f}{m.f1:>10.2f}{m.support:>9d}")
        return "\n".join(lines) + "\n"

    def to_markdown(self) -> str:
        out = ["| class | precision | recall | f1-score | support |", "|---|---|---|---|---|"]
        for lab, m in self.per_class.items():
            out.append(f"| {lab.slug} | {m.precision:.2f} | {m.recall:.2f} | {m.f1:.2f} | {m.support} |")
        out.append(f"| accuracy | | | {self.accuracy:.2f} | {self.total} |")
        for name, m in (("macro avg", self.macro), ("weighted avg", self.weighted)):
            out.append(f"| {name} | {m.precision:.2f} | {m.recall:.2f} | {m.f1:.2f} | {m.support} |")
        return "\n".join(out) + "\n"


def _ratio(num, den) -> tuple[Fraction, bool]:
    if den == 0:
        return Fraction(0), True
    return Fraction(num) / den, False


def report(cm: ConfusionMatrix) -> MetricReport:
    """Derive the metric family from a confusion matrix.

    Everything is computed in exact rational arithmetic and rounded once, so
    identities such as weighted recall == accuracy hold bit for bit.
    Undefined ratios are 0 and counted in ``zero_division``. Macro averages
    run over classes with nonzero support; weighted averages use support.
    """
    counts = cm.counts.astype(np.int64)
    total = int(counts.sum())
    if total == 0:
        raise Empty("confusion matrix has no items")
    diag = [int(v) for v in np.diag(counts)]
    col = [int(v) for v in counts.sum(axis=0)]
    row = [int(v) for v in counts.sum(axis=1)]
    exact = []
    undefined = 0
    for c in range(counts.shape[0]):
        prec, bad_p = _ratio(diag[c], col[c])
        rec, bad_r = _ratio(diag[c], row[c])
        f1, bad_f = _ratio(2 * prec * rec, prec + rec)
        undefined += bad_p + bad_r + bad_f
        exact.append((prec, rec, f1, row[c]))

    populated = [e for e in exact if e[3] > 0]
    n = len(populated)

    def avg(i, weighted):
        if weighted:
            return float(sum(e[i] * e[3] for e in populated) / total)
        return float(sum(e[i] for e in populated) / n)

    per_class = {
        Label(c): ClassMetrics(float(p), float(r), float(f), s) for c, (p, r, f, s) in enumerate(exact)
    }
    return MetricReport(
        per_class=per_class,
        accuracy=float(Fraction(sum(diag), total)),
        macro=ClassMetrics(avg(0, False), avg(1, False), avg(2, False), total),
        weighted=ClassMetrics(avg(0, True), avg(1, True), avg(2, True), total),
        total=total,
        zero_division=undefined,
        confusion=cm,
    )
