"""Evaluation-time calibration metrics and temperature scaling.

Bins are equal-width on [0, 1] and closed on the right: bin m holds
confidences in ((m-1)/M, m/M].  A confidence of exactly 0 goes to bin 1.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_BINS = 15
TEMPERATURE_GRID = np.round(np.arange(10, 501) / 100.0, 2)  # 0.10, 0.11, ..., 5.00


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class PredictionLog:
    probs: np.ndarray
    labels: np.ndarray
    logits: np.ndarray | None = None

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.probs.ndim != 2 or self.probs.shape[0] != self.labels.shape[0]:
            raise ValueError(f"probs {self.probs.shape} and labels {self.labels.shape} disagree")
        if self.labels.size:
            if self.labels.min() < 0 or self.labels.max() >= self.probs.shape[1]:
                raise ValueError("labels out of range")
            if np.abs(self.probs.sum(axis=1) - 1.0).max() > 1e-9:
                raise ValueError("probability rows must sum to 1")
        if self.logits is not None:
            self.logits = np.asarray(self.logits, dtype=np.float64)
            if self.logits.shape != self.probs.shape:
                raise ValueError("logits and probs must share a shape")

    @classmethod
    def from_logits(cls, logits: np.ndarray, labels) -> "PredictionLog":
        return cls(softmax_np(logits), labels, logits)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def confidences(self) -> np.ndarray:
        return self.probs.max(axis=1)

    @property
    def predictions(self) -> np.ndarray:
        return self.probs.argmax(axis=1)

    @property
    def correct(self) -> np.ndarray:
        return (self.predictions == self.labels).astype(np.float64)


@dataclass
class BinStats:
    counts: np.ndarray
    conf_sums: np.ndarray
    correct_sums: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def gap_sum(self) -> float:
        """sum_m |B_m| * |acc(B_m) - conf(B_m)|, i.e. N times the ECE."""
        return float(np.abs(self.correct_sums - self.conf_sums).sum())


def bin_index(conf: np.ndarray, bins: int) -> np.ndarray:
    edges = np.arange(bins + 1) / bins
    return np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, bins - 1)


def bin_stats(conf: np.ndarray, hits: np.ndarray, bins: int = DEFAULT_BINS) -> BinStats:
    if bins < 1:
        raise ValueError("need at least one bin")
    idx = bin_index(np.asarray(conf, dtype=np.float64), bins)
    return BinStats(
        counts=np.bincount(idx, minlength=bins),
        conf_sums=np.bincount(idx, weights=conf, minlength=bins),
        correct_sums=np.bincount(idx, weights=hits, minlength=bins),
    )


def _nonempty(log: PredictionLog) -> None:
    if len(log) == 0:
        raise ValueError("prediction log is empty")


def ece(log: PredictionLog, bins: int = DEFAULT_BINS) -> float:
    _nonempty(log)
    return bin_stats(log.confidences, log.correct, bins).gap_sum() / len(log)


def cece(log: PredictionLog, bins: int = DEFAULT_BINS) -> float:
    """Class-wise ECE: every sample is binned for every class by p_ik."""
    _nonempty(log)
    n, k = log.probs.shape
    total = 0.0
    for c in range(k):
        stats = bin_stats(log.probs[:, c], (log.labels == c).astype(np.float64), bins)
        total += stats.gap_sum() / n
    return total / k


def accuracy(log: PredictionLog) -> float:
    _nonempty(log)
    return float(log.correct.mean())


def apply_temperature(logits: np.ndarray, temperature: float, labels) -> PredictionLog:
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    logits = np.asarray(logits, dtype=np.float64)
    return PredictionLog(softmax_np(logits / temperature), labels, logits)


def fit_temperature(val: PredictionLog, bins: int = DEFAULT_BINS, grid: np.ndarray = TEMPERATURE_GRID) -> float:
    """Grid value minimizing validation ECE; ties go to the smallest T."""
    if val.logits is None:
        raise ValueError("temperature fitting needs logits")
    scores = [ece(apply_temperature(val.logits, t, val.labels), bins) for t in grid]
    return float(grid[int(np.argmin(scores))])


@dataclass
class ReliabilityDiagram:
    centers: np.ndarray
    accuracy: np.ndarray
    confidence: np.ndarray
    counts: np.ndarray

    def rows(self) -> list[dict]:
        return [
            {"bin_center": float(c), "accuracy": float(a), "confidence": float(f), "count": int(n)}
            for c, a, f, n in zip(self.centers, self.accuracy, self.confidence, self.counts)
        ]

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["bin_center", "accuracy", "confidence", "count"])
            w.writeheader()
            w.writerows(self.rows())


def reliability(log: PredictionLog, bins: int = DEFAULT_BINS) -> ReliabilityDiagram:
    """Per-bin accuracy and mean confidence; empty bins report 0 for both."""
    stats = bin_stats(log.confidences, log.correct, bins)
    safe = np.maximum(stats.counts, 1)
    return ReliabilityDiagram(
        centers=(2.0 * np.arange(1, bins + 1) - 1.0) / (2.0 * bins),
        accuracy=np.where(stats.counts > 0, stats.correct_sums / safe, 0.0),
        confidence=np.where(stats.counts > 0, stats.conf_sums / safe, 0.0),
        counts=stats.counts,
    )
