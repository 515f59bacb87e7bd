"""One-vs-rest precision, recall and F1 with macro averaging.

Scores are percentages in [0, 100].  Any 0/0 ratio counts as 0 and the
affected class is listed in ``EvalReport.degenerate``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

CLASS_NAMES = ("neutral", "positive", "negative")
NUM_CLASSES = len(CLASS_NAMES)


class ConfusionMatrix:
    """3x3 counts; rows are true classes, columns predicted classes."""

    def __init__(self, counts=None):
        if counts is None:
            counts = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
        counts = np.array(counts, dtype=np.int64)
        if counts.shape != (NUM_CLASSES, NUM_CLASSES) or (counts < 0).any():
            raise ContractError("confusion matrix must be 3x3 non-negative counts")
        self.counts = counts

    @classmethod
    def from_labels(cls, true, pred) -> "ConfusionMatrix":
        cm = cls()
        cm.update(true, pred)
        return cm

    def accumulate(self, true_label: int, predicted_label: int) -> "ConfusionMatrix":
        for lab in (true_label, predicted_label):
            if lab not in (0, 1, 2):
                raise ContractError(f"label {lab} outside {{0, 1, 2}}")
        self.counts[true_label, predicted_label] += 1
        return self

    def update(self, true, pred) -> "ConfusionMatrix":
        true = np.asarray(true, dtype=np.int64).reshape(-1)
        pred = np.asarray(pred, dtype=np.int64).reshape(-1)
        if true.shape != pred.shape:
            raise ContractError("true and predicted label arrays differ in length")
        for arr in (true, pred):
            if arr.size and (arr.min() < 0 or arr.max() >= NUM_CLASSES):
                raise ContractError("label outside {0, 1, 2}")
        np.add.at(self.counts, (true, pred), 1)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accuracy(self) -> float:
        return 100.0 * np.trace(self.counts) / self.total if self.total else 0.0

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def __repr__(self):
        return f"ConfusionMatrix({self.counts.tolist()})"


def _ratio(num: float, den: float) -> float:
    return 100.0 * num / den if den else 0.0


def class_metrics(cm: ConfusionMatrix, c: int) -> tuple[float, float, float]:
    """Precision, recall and F1 of class ``c`` against the other two."""
    counts = cm.counts
    tp = counts[c, c]
    fp = counts[:, c].sum() - tp
    fn = counts[c, :].sum() - tp
    p = _ratio(tp, tp + fp)
    r = _ratio(tp, tp + fn)
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return float(p), float(r), float(f1)


@dataclass
class Scores:
    precision: float
    recall: float
    f1: float

    def as_tuple(self):
        return self.precision, self.recall, self.f1


@dataclass
class EvalReport:
    per_class: dict[str, Scores]
    macro: Scores
    accuracy: float
    confusion: ConfusionMatrix
    degenerate: list[str] = field(default_factory=list)

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix) -> "EvalReport":
        per_class, degenerate = {}, []
        for c, name in enumerate(CLASS_NAMES):
            per_class[name] = Scores(*class_metrics(cm, c))
            if cm.counts[:, c].sum() == 0 or cm.counts[c, :].sum() == 0:
                degenerate.append(name)
        report = cls(per_class, Scores(0.0, 0.0, 0.0), cm.accuracy(), cm, degenerate)
        report.macro = Scores(*macro_average(report))
        return report

    @classmethod
    def from_labels(cls, true, pred) -> "EvalReport":
        return cls.from_confusion(ConfusionMatrix.from_labels(true, pred))

    def to_dict(self) -> dict:
        return {
            "per_class": {k: {"P": round(v.precision, 2), "R": round(v.recall, 2), "F1": round(v.f1, 2)} for k, v in self.per_class.items()},
            "macro": {"P": round(self.macro.precision, 2), "R": round(self.macro.recall, 2), "F1": round(self.macro.f1, 2)},
            "accuracy": round(self.accuracy, 2),
            "confusion": self.confusion.counts.tolist(),
            "degenerate": list(self.degenerate),
        }


def macro_average(report: EvalReport) -> tuple[float, float, float]:
    """Unweighted means of per-class P, R and F1, each averaged on its own."""
    vals = np.array([s.as_tuple() for s in report.per_class.values()])
    p, r, f1 = vals.mean(axis=0)
    return float(p), float(r), float(f1)


def average_reports(reports: list[EvalReport]) -> EvalReport:
    """Arithmetic mean of every metric across reports; confusion counts are summed."""
    if not reports:
        raise ContractError("nothing to average")
    per_class = {}
    for name in CLASS_NAMES:
        vals = np.array([r.per_class[name].as_tuple() for r in reports])
        per_class[name] = Scores(*map(float, vals.mean(axis=0)))
    macro = np.array([r.macro.as_tuple() for r in reports]).mean(axis=0)
    confusion = ConfusionMatrix(np.sum([r.confusion.counts for r in reports], axis=0))
    degenerate = sorted({d for r in reports for d in r.degenerate})
    return EvalReport(
        per_class,
        Scores(*map(float, macro)),
        float(np.mean([r.accuracy for r in reports])),
        confusion,
        degenerate,
    )


_DISPLAY = {"neutral": "Neutral", "positive": "Positive", "negative": "Negative"}
_MODEL_DISPLAY = {
    "dnn": "DNN",
    "cnn": "CNN",
    "lstm": "LSTM",
    "bilstm": "Bi-LSTM",
    "bilstm_attention": "Bi-LSTM based attention",
}


def format_table(reports: dict[str, EvalReport]) -> str:
    """Plain-text comparison: one block of P/R/F1 rows per model."""
    name_w = max([len("Model")] + [len(_MODEL_DISPLAY.get(m, m)) for m in reports])
    cols = [_DISPLAY[c] for c in CLASS_NAMES] + ["Macro"]
    lines = [f"{'Model':<{name_w}}  Index  " + "  ".join(f"{c:>8}" for c in cols)]
    lines.append("-" * len(lines[0]))
    for model, rep in reports.items():
        for i, (label, attr) in enumerate((("P", "precision"), ("R", "recall"), ("F1", "f1"))):
            shown = _MODEL_DISPLAY.get(model, model) if i == 0 else ""
            vals = [getattr(rep.per_class[c], attr) for c in CLASS_NAMES] + [getattr(rep.macro, attr)]
            lines.append(f"{shown:<{name_w}}  {label:<5}  " + "  ".join(f"{v:8.2f}" for v in vals))
    return "\n".join(lines)


def reports_to_json(reports: dict[str, EvalReport]) -> str:
    return json.dumps({m: r.to_dict() for m, r in reports.items()}, indent=2, sort_keys=True)
