"""Multi-class evaluation: confusion matrices, accuracy, precision, recall,
F1 (all in percent) and the single-vs-multi comparison table.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

MODEL_ORDER = ("lstm", "gru", "bi_gru", "rnn", "bi_lstm")
LEARNER_ORDER = ("single", "multi")
TASK_ORDER = ("mode", "purpose")


class ConfusionMatrix:
    """k x k counts, true class by row, predicted class by column."""

    def __init__(self, n_classes: int):
        if n_classes < 1:
            raise ContractError("confusion matrix needs at least one class")
        self.counts = np.zeros((n_classes, n_classes), dtype=np.int64)

    @classmethod
    def from_labels(cls, true, pred, n_classes: int) -> "ConfusionMatrix":
        cm = cls(n_classes)
        cm.add(true, pred)
        return cm

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def add(self, true, pred) -> None:
        true = np.asarray(true, dtype=np.int64)
        pred = np.asarray(pred, dtype=np.int64)
        if true.shape != pred.shape:
            raise ContractError(f"label arrays differ in length: {true.shape} vs {pred.shape}")
        k = self.n_classes
        if ((true < 0) | (true >= k)).any() or ((pred < 0) | (pred >= k)).any():
            raise ContractError(f"labels outside [0, {k})")
        np.add.at(self.counts, (true, pred), 1)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.n_classes != self.n_classes:
            raise ContractError("cannot merge confusion matrices of different sizes")
        self.counts += other.counts
        return self


def accuracy(cm: ConfusionMatrix) -> float:
    """Percent of correct predictions."""
    if cm.total == 0:
        raise ContractError("accuracy of an empty confusion matrix is undefined")
    return 100.0 * float(np.trace(cm.counts)) / cm.total


@dataclass
class PrecisionRecall:
    per_class_precision: np.ndarray  # percent; 0 where a class was never predicted
    per_class_recall: np.ndarray
    precision: float  # aggregated over classes present in the true labels
    recall: float


def precision_recall(cm: ConfusionMatrix, average: str = "macro") -> PrecisionRecall:
    """Per-class and aggregated precision/recall in percent.

    Aggregation averages over classes that occur in the true labels; a class
    that was never predicted contributes precision 0.
    """
    if cm.total == 0:
        raise ContractError("precision/recall of an empty confusion matrix is undefined")
    if average not in ("macro", "weighted"):
        raise ContractError(f"unknown averaging {average!r}")
    counts = cm.counts.astype(np.float64)
    diag = np.diag(counts)
    col = counts.sum(axis=0)
    row = counts.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.where(col > 0, diag / np.maximum(col, 1), 0.0) * 100.0
        r = np.where(row > 0, diag / np.maximum(row, 1), 0.0) * 100.0
    present = row > 0
    if average == "macro":
        agg_p = float(p[present].mean())
        agg_r = float(r[present].mean())
    else:
        w = row[present] / row[present].sum()
        agg_p = float((p[present] * w).sum())
        agg_r = float((r[present] * w).sum())
    return PrecisionRecall(p, r, agg_p, agg_r)


def f1(precision: float, recall: float) -> float:
    """Harmonic mean of precision and recall (percent); 0 when both are 0."""
    if precision < 0 or recall < 0:
        raise ContractError("precision and recall must be >= 0")
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass
class MetricsReport:
    task: str  # mode | purpose
    learner: str  # single | multi
    model: str  # cell kind tag
    epoch: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    split: str = "test"
    per_class_precision: tuple = field(default=())
    per_class_recall: tuple = field(default=())

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix, task, learner, model, epoch, split="test",
                       average="macro") -> "MetricsReport":
        pr = precision_recall(cm, average=average)
        return cls(
            task=task,
            learner=learner,
            model=model,
            epoch=epoch,
            accuracy=accuracy(cm),
            precision=pr.precision,
            recall=pr.recall,
            f1=f1(pr.precision, pr.recall),
            split=split,
            per_class_precision=tuple(pr.per_class_precision),
            per_class_recall=tuple(pr.per_class_recall),
        )


def _order(report: MetricsReport):
    def idx(seq, value):
        return seq.index(value) if value in seq else len(seq)

    return (
        idx(LEARNER_ORDER, report.learner),
        idx(TASK_ORDER, report.task),
        idx(MODEL_ORDER, report.model),
    )


COLUMNS = ("learner", "task", "model", "accuracy", "precision", "recall", "f1")


@dataclass
class ComparisonTable:
    epoch: int
    rows: list[MetricsReport]
    notice: str | None = None

    def to_delimited(self, sep: str = "\t") -> str:
        lines = [sep.join(COLUMNS)]
        for r in self.rows:
            lines.append(
                sep.join(
                    [r.learner, r.task, r.model]
                    + [f"{v:.2f}" for v in (r.accuracy, r.precision, r.recall, r.f1)]
                )
            )
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        header = ["Learner", "Task", "Model", "Accuracy (%)", "Precision (%)", "Recall (%)", "F1 (%)"]
        body = [
            [r.learner, r.task, r.model]
            + [f"{v:.2f}" for v in (r.accuracy, r.precision, r.recall, r.f1)]
            for r in self.rows
        ]
        widths = [max(len(header[i]), *(len(row[i]) for row in body)) if body else len(header[i])
                  for i in range(len(header))]
        def fmt(row):
            return "  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip()
        lines = [f"Prediction results (epoch {self.epoch}, test data)"]
        if self.notice:
            lines.append(f"NOTE: {self.notice}")
        lines.append(fmt(header))
        lines.append("-" * (sum(widths) + 2 * (len(widths) - 1)))
        lines.extend(fmt(row) for row in body)
        return "\n".join(lines) + "\n"


def compare_report(single_reports, multi_reports) -> ComparisonTable:
    """Side-by-side table of single-task vs multi-task results at one epoch."""
    single_reports = list(single_reports)
    multi_reports = list(multi_reports)
    rows = single_reports + multi_reports
    if not rows:
        raise ContractError("compare_report needs at least one metrics report")
    epochs = {r.epoch for r in rows}
    if len(epochs) > 1:
        raise ContractError(f"reports span multiple epochs: {sorted(epochs)}")
    notice = None
    if not multi_reports:
        notice = "no multi-task reports supplied; table covers single-task learners only"
    elif not single_reports:
        notice = "no single-task reports supplied; table covers multi-task learners only"
    rows = sorted(rows, key=_order)
    return ComparisonTable(epoch=epochs.pop(), rows=rows, notice=notice)


def parse_delimited(text: str, sep: str = "\t") -> ComparisonTable:
    """Inverse of ComparisonTable.to_delimited for the numeric columns."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or tuple(lines[0].split(sep)) != COLUMNS:
        raise ContractError("not a comparison table: bad header")
    rows = []
    for ln in lines[1:]:
        learner, task, model, acc, p, r, f = ln.split(sep)
        rows.append(
            MetricsReport(
                task=task, learner=learner, model=model, epoch=-1,
                accuracy=float(acc), precision=float(p), recall=float(r), f1=float(f),
            )
        )
    return ComparisonTable(epoch=-1, rows=rows)
