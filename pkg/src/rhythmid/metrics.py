"""Balanced accuracy, chance level and loss smoothing."""

from __future__ import annotations

import json
from fractions import Fraction
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass
class ConfusionMatrix:
    """Counts indexed by (true class, predicted class)."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got shape {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValueError("confusion counts must be non-negative")

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def from_predictions(cls, y_true: Sequence[int], y_pred: Sequence[int], n_classes: int) -> "ConfusionMatrix":
        counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(counts, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
        return cls(counts)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.counts.shape != other.counts.shape:
            raise ValueError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.counts + other.counts)

    def per_class_recall(self) -> np.ndarray:
        """Recall per class; NaN for classes with no true samples."""
        support = self.counts.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(support > 0, np.diag(self.counts) / support, np.nan)

    def to_csv(self) -> str:
        n = self.n_classes
        rows = ["true\\pred," + ",".join(str(j) for j in range(n))]
        rows += [f"{i}," + ",".join(str(int(c)) for c in self.counts[i]) for i in range(n)]
        return "\n".join(rows) + "\n"


def predict(logits: np.ndarray) -> np.ndarray:
    """Argmax per row; ties go to the lowest class index."""
    return np.argmax(logits, axis=-1)


def balanced_accuracy(cm: ConfusionMatrix) -> float:
    """Mean recall over the classes that have at least one true sample.

    Evaluated in exact rational arithmetic, so the result is the correctly
    rounded value of the formula (and equals plain accuracy bit-for-bit on a
    class-balanced set).
    """
    support = cm.counts.sum(axis=1)
    scored = np.nonzero(support > 0)[0]
    if scored.size == 0:
        raise ValueError("balanced accuracy needs at least one class with true samples")
    total = sum(Fraction(int(cm.counts[c, c]), int(support[c])) for c in scored)
    return float(total / len(scored))


def chance_level(n_classes: int) -> float:
    if n_classes < 1:
        raise ValueError("n_classes must be >= 1")
    return 1.0 / n_classes


def format_chance(n_classes: int) -> str:
    return f"{chance_level(n_classes):.4f}"


@dataclass
class MetricsReport:
    balanced_accuracy: float
    accuracy: float
    per_class_recall: np.ndarray
    chance_level: float
    n_classes_scored: int
    n_excluded_classes: int
    n_samples: int

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix) -> "MetricsReport":
        recall = cm.per_class_recall()
        scored = int((~np.isnan(recall)).sum())
        return cls(
            balanced_accuracy=balanced_accuracy(cm),
            accuracy=float(Fraction(int(np.trace(cm.counts)), cm.total)),
            per_class_recall=recall,
            chance_level=chance_level(cm.n_classes),
            n_classes_scored=scored,
            n_excluded_classes=cm.n_classes - scored,
            n_samples=cm.total,
        )

    def to_json(self) -> str:
        return json.dumps(
            {
                "balanced_accuracy": self.balanced_accuracy,
                "accuracy": self.accuracy,
                "chance_level": self.chance_level,
                "n_classes_scored": self.n_classes_scored,
                "n_excluded_classes": self.n_excluded_classes,
                "n_samples": self.n_samples,
            },
            sort_keys=True,
        )


def moving_average(series: Sequence[float], window: int = 10) -> np.ndarray:
    """Trailing mean; the first ``window - 1`` points average the available prefix."""
    if window < 1:
        raise ValueError("window must be >= 1")
    x = np.asarray(series, dtype=np.float64)
    if x.size == 0:
        return x
    padded = np.concatenate([np.full(window - 1, np.nan), x])
    windows = np.lib.stride_tricks.sliding_window_view(padded, window)
    out = np.nanmean(windows, axis=1)
    # summation rounding must not push a mean outside its window's range
    return np.clip(out, np.nanmin(windows, axis=1), np.nanmax(windows, axis=1))
