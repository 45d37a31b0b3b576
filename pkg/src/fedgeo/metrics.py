"""Evaluation metrics: accuracy, per-class average accuracy, macro F1,
error rate, and class-index mean absolute error."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

__all__ = ["MetricsRow", "compute_metrics"]


@dataclass(frozen=True)
class MetricsRow:
    accuracy: float
    average_accuracy: float
    macro_f1: float
    error_rate: float
    mae: float

    def __post_init__(self):
        if self.error_rate != 1.0 - self.accuracy:
            raise ContractError("error_rate must equal 1 - accuracy exactly")
        if self.mae < 0:
            raise ContractError(f"mae must be non-negative, got {self.mae}")


def compute_metrics(predictions, labels, n_classes: int) -> MetricsRow:
    """Score integer predictions against integer labels.

    average_accuracy is the unweighted mean of per-class recalls (classes with
    zero support are skipped); macro_f1 averages per-class F1 over all
    ``n_classes`` classes with 0 substituted where F1 is undefined; mae is the
    mean absolute difference of class indices, so every error contributes at
    least one index unit and mae >= error_rate always holds.
    """
    pred = np.asarray(predictions, dtype=np.int64).reshape(-1)
    true = np.asarray(labels, dtype=np.int64).reshape(-1)
    if pred.shape != true.shape:
        raise ContractError(
            f"length mismatch: {pred.shape[0]} predictions, {true.shape[0]} labels")
    if pred.size == 0:
        raise ContractError("cannot score an empty evaluation")
    for name, arr in (("predictions", pred), ("labels", true)):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise ContractError(f"{name} outside [0, {n_classes})")

    accuracy = float((pred == true).mean())

    recalls = []
    f1s = []
    for c in range(n_classes):
        support = true == c
        predicted = pred == c
        tp = float((support & predicted).sum())
        if support.any():
            recalls.append(tp / support.sum())
        precision_den = predicted.sum()
        recall_den = support.sum()
        if tp == 0.0:
            f1s.append(0.0)
        else:
            precision = tp / precision_den
            recall = tp / recall_den
            f1s.append(2.0 * precision * recall / (precision + recall))
    average_accuracy = float(np.mean(recalls)) if recalls else 0.0
    macro_f1 = float(np.mean(f1s)) if f1s else 0.0

    # Build mae on top of error_rate so the index-distance inequality
    # mae >= error_rate survives floating point: every wrong prediction
    # contributes its first index unit via error_rate, and only the exact
    # integer excess is added on top.
    error_rate = 1.0 - accuracy
    excess = int(np.abs(pred - true).sum()) - int((pred != true).sum())
    mae = error_rate + excess / pred.size
    return MetricsRow(
        accuracy=accuracy,
        average_accuracy=average_accuracy,
        macro_f1=macro_f1,
        error_rate=error_rate,
        mae=mae,
    )
