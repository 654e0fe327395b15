"""Task criteria, the relative-improvement metric, and calibration scores."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyInput

ECE_BINS = 15
# Brier score sums squared errors over classes (range [0, 2])
BRIER_CONVENTION = "sum_over_classes"


@dataclass
class MetricRecord:
    method_values: np.ndarray
    reference_values: np.ndarray
    higher_is_better: np.ndarray

    def __post_init__(self):
        self.method_values = np.asarray(self.method_values, dtype=float)
        self.reference_values = np.asarray(self.reference_values, dtype=float)
        self.higher_is_better = np.asarray(self.higher_is_better, dtype=bool)
        if not (self.method_values.shape == self.reference_values.shape == self.higher_is_better.shape):
            raise DimensionMismatch("metric record fields must have equal lengths")


def delta_m(record: MetricRecord) -> float:
    """Mean signed relative change vs. the single-task reference, in percent (lower is better)."""
    ref = record.reference_values
    if np.any(ref == 0):
        raise ZeroDivisionError("reference criterion equal to zero")
    sign = np.where(record.higher_is_better, -1.0, 1.0)
    return float(100.0 * np.mean(sign * (record.method_values - ref) / ref))


def ece(confidences, correct, bins: int = ECE_BINS) -> float:
    """Expected calibration error over equal-width confidence bins on [0, 1]."""
    conf = np.asarray(confidences, dtype=float).reshape(-1)
    hit = np.asarray(correct, dtype=float).reshape(-1)
    if conf.size == 0:
        raise EmptyInput("ece needs at least one prediction")
    if conf.shape != hit.shape:
        raise DimensionMismatch("confidences and correctness flags differ in length")
    # bins are (lo, hi]; confidence 0 joins the first bin
    idx = np.clip(np.ceil(conf * bins).astype(int) - 1, 0, bins - 1)
    total = 0.0
    for b in range(bins):
        mask = idx == b
        if mask.any():
            total += mask.sum() / conf.size * abs(hit[mask].mean() - conf[mask].mean())
    return float(total)


def as_class_probs(probs, kind: str) -> np.ndarray:
    """Binary P(y=1) columns become two-column class probabilities."""
    p = np.asarray(probs, dtype=float)
    if kind == "binary":
        p = p.reshape(-1)
        return np.stack([1.0 - p, p], axis=1)
    return np.atleast_2d(p)


def brier(probs, labels) -> float:
    """Mean over samples of the squared distance to the one-hot label."""
    p = np.atleast_2d(np.asarray(probs, dtype=float))
    if p.shape[0] == 0:
        raise EmptyInput("brier needs at least one prediction")
    lab = np.asarray(labels)
    onehot = lab.astype(float) if lab.ndim == 2 else np.eye(p.shape[1])[lab.astype(int).reshape(-1)]
    if onehot.shape != p.shape:
        raise DimensionMismatch(f"probabilities {p.shape} vs labels {onehot.shape}")
    return float(np.mean(np.sum((p - onehot) ** 2, axis=1)))


def predicted_class(probs, kind: str) -> np.ndarray:
    """Binary ties at 0.5 go to class 0; multiclass ties to the lowest index."""
    if kind == "binary":
        return (np.asarray(probs, dtype=float).reshape(-1) > 0.5).astype(int)
    return np.argmax(np.atleast_2d(probs), axis=1)


def task_criteria(predictions, labels, kind: str) -> float:
    """MAE for regression (on whatever scale the inputs are), accuracy otherwise."""
    pred = np.asarray(predictions, dtype=float)
    lab = np.asarray(labels)
    if kind == "regression":
        lab = lab.reshape(lab.shape[0], -1)
        if pred.size != lab.size:
            raise DimensionMismatch(f"predictions {pred.shape} vs labels {lab.shape}")
        pred = pred.reshape(lab.shape)
        return float(np.mean(np.abs(pred - lab)))
    cls = predicted_class(pred, kind)
    if cls.shape[0] != lab.reshape(-1).shape[0]:
        raise DimensionMismatch("predictions and labels differ in length")
    return float(np.mean(cls == lab.reshape(-1).astype(int)))


def calibration(probs, labels, kind: str, bins: int = ECE_BINS) -> tuple[float, float]:
    """(ECE, Brier) of a classification task's predicted probabilities."""
    p = as_class_probs(probs, kind)
    lab = np.asarray(labels).reshape(-1).astype(int)
    conf = p.max(axis=1)
    hit = predicted_class(probs, kind) == lab
    return ece(conf, hit, bins), brier(p, lab)


def higher_is_better(kinds: Sequence[str]) -> np.ndarray:
    return np.array([k != "regression" for k in kinds])
