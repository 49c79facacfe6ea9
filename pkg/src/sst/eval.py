"""Top-1 accuracy, per-class accuracy, confusion matrices, report tables.

Accuracies are stored as fractions in [0, 1]; the CSV formatters print them
as percentages with two decimals, which is the convention every comparison
table here follows.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .model import predict

CSV_COLUMNS = ("iteration", "slice_size", "hypothesis", "params", "top1", "wall_seconds")


@dataclass(frozen=True, eq=False)
class EvalReport:
    """Confusion-matrix summary of one model on one labeled test set.

    ``missing_classes`` lists classes with no test rows; their per-class
    accuracy is pinned to 0 rather than left undefined.
    """

    top1: float
    per_class_acc: np.ndarray
    confusion: np.ndarray
    n_examples: int
    missing_classes: tuple = ()

    def __post_init__(self):
        if not 0.0 <= self.top1 <= 1.0:
            raise ValidationError(f"top1 {self.top1} outside [0, 1]")
        if int(self.confusion.sum()) != self.n_examples:
            raise ValidationError("confusion entries must sum to n_examples")


def evaluate(model, test) -> EvalReport:
    """Pure and row-order invariant; ties in the argmax go to the lower class."""
    if test.num_rows == 0:
        raise ValidationError("test set is empty")
    c = model.spec.num_classes
    if test.num_classes > c:
        raise ValidationError(
            f"test set has {test.num_classes} classes, model only {c}"
        )
    pred = predict(model, test.features)
    confusion = np.zeros((c, c), dtype=np.int64)
    np.add.at(confusion, (test.labels.astype(np.int64), pred.astype(np.int64)), 1)
    row_sums = confusion.sum(axis=1)
    missing = tuple(int(i) for i in np.flatnonzero(row_sums == 0))
    per_class = np.divide(
        np.diag(confusion),
        row_sums,
        out=np.zeros(c, dtype=np.float64),
        where=row_sums > 0,
    )
    top1 = float(np.trace(confusion) / test.num_rows)
    return EvalReport(top1, per_class, confusion, test.num_rows, missing)


def _record_row(rec, prefix=()) -> list:
    return [
        *prefix,
        str(rec.t),
        str(rec.slice_size),
        rec.hypothesis.short_name(),
        str(rec.hypothesis.parameter_count()),
        f"{100.0 * rec.top1:.2f}",
        f"{rec.wall_seconds:.3f}",
    ]


def format_iteration_table(report) -> str:
    """One CSV row per iteration; top-1 printed as percent to 2 decimals."""
    if not report.records:
        raise ValidationError("report has no records")
    out = io.StringIO()
    out.write(",".join(CSV_COLUMNS) + "\n")
    for rec in report.records:
        out.write(",".join(_record_row(rec)) + "\n")
    return out.getvalue()


def format_comparison_table(named_reports) -> str:
    """Side-by-side runs: ``named_reports`` is an ordered mapping
    run name -> RunReport; rows carry a leading ``run`` column."""
    if not named_reports:
        raise ValidationError("no reports to compare")
    out = io.StringIO()
    out.write(",".join(("run",) + CSV_COLUMNS) + "\n")
    for name, report in named_reports.items():
        if "," in name:
            raise ValidationError(f"run name {name!r} contains a comma")
        for rec in report.records:
            out.write(",".join(_record_row(rec, prefix=(name,))) + "\n")
    return out.getvalue()
