"""Confusion matrices, per-class precision/recall/F1, and macro F1.

Reference validation scores reported for this architecture on the
(private) competition dataset; kept as documentation constants, never as
test targets:

* detection, augmented training: 0.8681 macro F1
* detection, no augmentation: 0.8876 macro F1
* severity: 0.7277 macro F1
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

REFERENCE_MACRO_F1 = {
    "detection_augmented": 0.8681,
    "detection_no_augment": 0.8876,
    "severity": 0.7277,
}


def confusion_matrix(true_labels, pred_labels, num_classes: int) -> np.ndarray:
    """K x K count matrix; rows index the true class, columns the prediction."""
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(pred_labels, dtype=np.int64)
    if t.shape != p.shape or t.ndim != 1:
        raise ValueError(f"label vectors must be flat and equal-length, got {t.shape}, {p.shape}")
    if num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    for name, v in (("true", t), ("predicted", p)):
        if v.size and (v.min() < 0 or v.max() >= num_classes):
            raise ValueError(f"{name} labels out of range [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def per_class_prf(confusion: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Precision, recall, F1 per class; every 0/0 resolves to 0."""
    cm = np.asarray(confusion, dtype=np.float64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.shape[0] < 1:
        raise ValueError(f"confusion matrix must be square and nonempty, got shape {cm.shape}")
    if np.any(cm < 0):
        raise ValueError("confusion matrix entries must be nonnegative")
    tp = np.diag(cm)
    pred_total = cm.sum(axis=0)
    true_total = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(pred_total > 0, tp / pred_total, 0.0)
        recall = np.where(true_total > 0, tp / true_total, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / np.where(denom > 0, denom, 1.0), 0.0)
    return precision, recall, f1


def macro_f1(confusion: np.ndarray) -> float:
    """Unweighted mean of the per-class F1 scores."""
    _, _, f1 = per_class_prf(confusion)
    return float(f1.mean())


@dataclass
class EvalReport:
    """One evaluation pass summarized: counts, per-class scores, loss."""

    class_names: Tuple[str, ...]
    confusion: np.ndarray
    loss: float

    def __post_init__(self):
        cm = np.asarray(self.confusion, dtype=np.int64)
        k = len(self.class_names)
        if cm.shape != (k, k):
            raise ValueError(f"confusion shape {cm.shape} does not match {k} classes")
        self.confusion = cm
        self.precision, self.recall, self.f1 = per_class_prf(cm)
        self.macro_f1 = float(self.f1.mean())
        self.samples = int(cm.sum())

    def to_text(self) -> str:
        """Flat `key = value` block; '#' lines are commentary."""
        lines = [
            f"samples = {self.samples}",
            f"loss = {self.loss:.6f}",
            f"macro_f1 = {self.macro_f1:.6f}",
        ]
        for i, name in enumerate(self.class_names):
            lines.append(f"precision.{name} = {self.precision[i]:.6f}")
            lines.append(f"recall.{name} = {self.recall[i]:.6f}")
            lines.append(f"f1.{name} = {self.f1[i]:.6f}")
        lines.append("# confusion rows = true class, columns = predicted class")
        for i, tname in enumerate(self.class_names):
            for j, pname in enumerate(self.class_names):
                lines.append(f"confusion.{tname}.{pname} = {int(self.confusion[i, j])}")
        lines.append("# published reference scores on the original dataset "
                     "(not reproducible here):")
        if len(self.class_names) == 2:
            lines.append(f"# reference.macro_f1.augmented = "
                         f"{REFERENCE_MACRO_F1['detection_augmented']}")
            lines.append(f"# reference.macro_f1.no_augment = "
                         f"{REFERENCE_MACRO_F1['detection_no_augment']}")
        else:
            lines.append(f"# reference.macro_f1 = {REFERENCE_MACRO_F1['severity']}")
        return "\n".join(lines) + "\n"
