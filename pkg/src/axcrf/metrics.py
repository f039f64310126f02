"""Confusion matrix, per-class precision/recall/F1, average F1, and OA.

The average F1 is the unweighted mean over all C classes; a class with no
true and no predicted points contributes an F1 of 0 rather than being
dropped, so the averaging rule stays exact regardless of which classes a
tile happens to contain.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = ["EvalReport", "confusion_matrix", "scores", "format_report"]


@dataclass
class EvalReport:
    matrix: np.ndarray               # C x C counts, rows true, columns predicted
    precision: np.ndarray            # per class, in [0, 1]
    recall: np.ndarray
    f1: np.ndarray
    average_f1: float
    overall_accuracy: float
    class_names: list[str] = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return self.matrix.shape[0]

    @property
    def total(self) -> int:
        return int(self.matrix.sum())

    def to_dict(self) -> dict:
        return {
            "confusion_matrix": self.matrix.tolist(),
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
            "f1": self.f1.tolist(),
            "average_f1": self.average_f1,
            "overall_accuracy": self.overall_accuracy,
            "class_names": list(self.class_names),
        }


def confusion_matrix(pred, truth, C: int) -> np.ndarray:
    """Counts matrix with entry (t, p) = points of true class t predicted p."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise ValueError(f"label arrays must be 1-D and equal length, "
                         f"got {pred.shape} and {truth.shape}")
    if C < 1:
        raise ValueError(f"need C >= 1, got {C}")
    for name, arr in (("pred", pred), ("truth", truth)):
        if arr.size and (arr.min() < 0 or arr.max() >= C):
            raise ValueError(f"{name} labels must lie in [0, {C}), "
                             f"got range [{arr.min()}, {arr.max()}]")
    cm = np.zeros((C, C), dtype=np.int64)
    np.add.at(cm, (truth.astype(np.intp), pred.astype(np.intp)), 1)
    return cm


def scores(cm: np.ndarray, class_names=None) -> EvalReport:
    """Per-class precision/recall/F1 plus OA and the unweighted average F1."""
    cm = np.asarray(cm)
    C = cm.shape[0]
    if cm.ndim != 2 or cm.shape != (C, C):
        raise ValueError(f"confusion matrix must be square, got {cm.shape}")
    if np.any(cm < 0) or not np.issubdtype(cm.dtype, np.integer):
        raise ValueError("confusion matrix must hold non-negative integer counts")
    total = int(cm.sum())
    if total == 0:
        raise ValueError("confusion matrix is all zero; nothing was evaluated")

    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        recall = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
        pr = precision + recall
        f1 = np.where(pr > 0, 2.0 * precision * recall / np.where(pr > 0, pr, 1.0), 0.0)

    if class_names is None:
        class_names = [f"class {i}" for i in range(C)]
    elif len(class_names) != C:
        raise ValueError(f"{len(class_names)} names for {C} classes")
    return EvalReport(matrix=cm, precision=precision, recall=recall, f1=f1,
                      average_f1=float(f1.mean()),
                      overall_accuracy=float(tp.sum() / total),
                      class_names=list(class_names))


def format_report(report: EvalReport, machine: bool = False) -> str:
    """Render a report; ``machine=True`` gives one JSON document instead."""
    if machine:
        return json.dumps(report.to_dict(), indent=2)
    C = report.n_classes
    width = max(len(n) for n in report.class_names)
    num_w = max(6, len(str(int(report.matrix.max()))))
    lines = ["confusion matrix (rows true, columns predicted)"]
    header = " " * (width + 2) + " ".join(f"{n[:num_w]:>{num_w}}" for n in report.class_names)
    lines.append(header)
    for i, name in enumerate(report.class_names):
        row = " ".join(f"{v:>{num_w}d}" for v in report.matrix[i])
        lines.append(f"{name:<{width}}  {row}")
    lines.append("")
    lines.append(f"{'class':<{width}}  {'precision':>9}  {'recall':>9}  {'F1':>9}")
    for i, name in enumerate(report.class_names):
        lines.append(f"{name:<{width}}  {report.precision[i]:>9.4f}  "
                     f"{report.recall[i]:>9.4f}  {report.f1[i]:>9.4f}")
    lines.append("")
    lines.append(f"average F1:      {report.average_f1:.4f}")
    lines.append(f"overall accuracy: {report.overall_accuracy:.4f}")
    return "\n".join(lines) + "\n"
