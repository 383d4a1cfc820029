"""Per-class recall, per-class F1 and macro F1 for binary predictions."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import DataError

CLASSES = (0, 1)
CLASS_NAMES = {0: "non-positive", 1: "positive"}


@dataclass
class MetricsReport:
    n: int
    confusion: list[list[int]]  # confusion[truth][prediction]
    accuracy: float
    recall: dict[int, float]
    precision: dict[int, float]
    f1: dict[int, float]
    macro_f1: float
    undefined: list[str] = field(default_factory=list)  # metrics reported as 0 for a 0/0

    def to_json(self) -> dict:
        d = asdict(self)
        for key in ("recall", "precision", "f1"):
            d[key] = {str(k): v for k, v in d[key].items()}
        return d

    def to_text(self) -> str:
        rows = [f"{'class':<14}{'accuracy':>10}{'precision':>11}{'F1 %':>9}"]
        for c in CLASSES:
            rows.append(f"{CLASS_NAMES[c]:<14}{self.recall[c]:>10.4f}{self.precision[c]:>11.4f}{100 * self.f1[c]:>9.2f}")
        rows.append(f"{'macro F1 %':<14}{100 * self.macro_f1:>30.2f}")
        rows.append(f"{'overall acc':<14}{self.accuracy:>10.4f}   n={self.n}")
        if self.undefined:
            rows.append("undefined (reported as 0): " + ", ".join(self.undefined))
        return "\n".join(rows) + "\n"


def _ratio(num: int, den: int, name: str, undefined: list[str]) -> float:
    if den == 0:
        undefined.append(name)
        return 0.0
    return num / den


def metrics_from_confusion(confusion) -> MetricsReport:
    cm = np.asarray(confusion, dtype=int)
    n = int(cm.sum())
    undefined: list[str] = []
    recall, precision, f1 = {}, {}, {}
    for c in CLASSES:
        tp = int(cm[c, c])
        fn = int(cm[c].sum() - tp)
        fp = int(cm[:, c].sum() - tp)
        recall[c] = _ratio(tp, tp + fn, f"recall_{c}", undefined)
        precision[c] = _ratio(tp, tp + fp, f"precision_{c}", undefined)
        f1[c] = _ratio(2 * tp, 2 * tp + fp + fn, f"f1_{c}", undefined)
    return MetricsReport(
        n=n,
        confusion=cm.tolist(),
        accuracy=_ratio(int(np.trace(cm)), n, "accuracy", undefined),
        recall=recall,
        precision=precision,
        f1=f1,
        macro_f1=(f1[0] + f1[1]) / 2,
        undefined=undefined,
    )


def compute_metrics(predictions: Sequence[int], truth: Sequence[int]) -> MetricsReport:
    """Metrics for binary labels.

    Per-class accuracy is the recall of that class. F1 is ``2TP / (2TP + FP + FN)``;
    a zero denominator gives 0 and is listed in ``undefined``.
    """
    p = np.asarray(predictions, dtype=int)
    y = np.asarray(truth, dtype=int)
    if p.shape != y.shape or p.ndim != 1:
        raise DataError(f"predictions and truth must be equal-length sequences ({p.shape} vs {y.shape})")
    if len(y) == 0:
        raise DataError("need at least one prediction")
    if not (np.isin(p, CLASSES).all() and np.isin(y, CLASSES).all()):
        raise DataError("labels must be 0 or 1")
    cm = np.zeros((2, 2), dtype=int)
    np.add.at(cm, (y, p), 1)
    return metrics_from_confusion(cm)
