"""Confusion matrices and precision / recall / F-measure / accuracy."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .errors import InputError


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise InputError(f"confusion matrix must be square, got shape {self.counts.shape}")
        if np.any(self.counts < 0):
            raise InputError("confusion matrix counts must be non-negative")
        if not self.class_names:
            self.class_names = [str(i) for i in range(self.k)]
        if len(self.class_names) != self.k:
            raise InputError(f"{len(self.class_names)} class names for a {self.k}-class matrix")

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def one_vs_rest(self, c: int) -> tuple[int, int, int, int]:
        """(TP, FP, FN, TN) with class ``c`` as the positive class."""
        tp = int(self.counts[c, c])
        fp = int(self.counts[:, c].sum()) - tp
        fn = int(self.counts[c, :].sum()) - tp
        return tp, fp, fn, self.total - tp - fp - fn


def confusion_matrix(true_labels, predicted_labels, k: int, class_names=None) -> ConfusionMatrix:
    t = np.asarray(true_labels)
    p = np.asarray(predicted_labels)
    if t.ndim != 1 or p.ndim != 1 or t.shape != p.shape:
        raise InputError(f"label vectors differ in length: {t.shape} vs {p.shape}")
    if t.size == 0:
        raise InputError("need at least one labelled sample")
    for name, v in (("true", t), ("predicted", p)):
        if not np.issubdtype(v.dtype, np.integer) or v.min() < 0 or v.max() >= k:
            raise InputError(f"{name} labels must be integers in [0, {k})")
    counts = np.bincount(t * k + p, minlength=k * k).reshape(k, k)
    return ConfusionMatrix(counts, list(class_names) if class_names is not None else [])


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def f_measure(precision: float, recall: float) -> float:
    """Harmonic mean of precision and recall (0 when both are 0)."""
    s = precision + recall
    return 2.0 * precision * recall / s if s else 0.0


def display(value: float, places: int = 3) -> str:
    """Round half-up to ``places`` decimals for report tables."""
    q = Decimal(1).scaleb(-places)
    return str(Decimal(repr(float(value))).quantize(q, rounding=ROUND_HALF_UP))


@dataclass
class MetricsReport:
    class_names: list[str]
    precision: list[float]
    recall: list[float]
    f_measure: list[float]
    macro_precision: float
    macro_recall: float
    macro_f_measure: float
    accuracy: float
    positive_class: int | None = None

    def rows(self) -> list[tuple[str, float, float, float]]:
        """(averaging, P, R, F) rows: the macro mean, then the positive class if set."""
        out = [("macro", self.macro_precision, self.macro_recall, self.macro_f_measure)]
        if self.positive_class is not None:
            c = self.positive_class
            out.append((f"positive:{self.class_names[c]}", self.precision[c], self.recall[c], self.f_measure[c]))
        return out

    def summary(self) -> str:
        lines = [f"{'class':<16}{'precision':>10}{'recall':>10}{'f-measure':>10}"]
        for name, p, r, f in zip(self.class_names, self.precision, self.recall, self.f_measure):
            lines.append(f"{name:<16}{display(p):>10}{display(r):>10}{display(f):>10}")
        lines.append(
            f"{'macro':<16}{display(self.macro_precision):>10}{display(self.macro_recall):>10}"
            f"{display(self.macro_f_measure):>10}"
        )
        lines.append(f"accuracy {display(self.accuracy)}")
        return "\n".join(lines)


def classification_metrics(cm: ConfusionMatrix, positive_class: int | None = None) -> MetricsReport:
    """Per-class one-vs-rest measures, their unweighted macro means and accuracy.

    A class whose denominator is zero scores 0 for that measure.
    """
    if cm.total < 1:
        raise InputError("confusion matrix is empty")
    precision, recall, fm = [], [], []
    for c in range(cm.k):
        tp, fp, fn, _ = cm.one_vs_rest(c)
        p, r = _ratio(tp, tp + fp), _ratio(tp, tp + fn)
        precision.append(p)
        recall.append(r)
        fm.append(f_measure(p, r))
    return MetricsReport(
        class_names=list(cm.class_names),
        precision=precision,
        recall=recall,
        f_measure=fm,
        macro_precision=float(np.mean(precision)),
        macro_recall=float(np.mean(recall)),
        macro_f_measure=float(np.mean(fm)),
        accuracy=int(np.trace(cm.counts)) / cm.total,
        positive_class=positive_class,
    )


METRICS_HEADER = [
    "model", "task", "precision", "recall", "f1", "accuracy",
    "precision_3dp", "recall_3dp", "f1_3dp", "accuracy_3dp", "averaging",
]


def metrics_csv(report: MetricsReport, model: str, task: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for averaging, p, r, f in report.rows():
        w.writerow([
            model, task, repr(p), repr(r), repr(f), repr(report.accuracy),
            display(p), display(r), display(f), display(report.accuracy), averaging,
        ])
    return buf.getvalue()


def confusion_csv(cm: ConfusionMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cm.class_names)
    for name, row in zip(cm.class_names, cm.counts):
        w.writerow([name, *map(int, row)])
    return buf.getvalue()


def read_confusion_csv(text: str) -> ConfusionMatrix:
    rows = list(csv.reader(io.StringIO(text)))
    names = rows[0]
    counts = [[int(v) for v in row[1:]] for row in rows[1:]]
    return ConfusionMatrix(np.array(counts), names)
