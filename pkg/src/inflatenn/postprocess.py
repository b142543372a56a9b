"""Prediction repair: scale normalization, mean filtering, time-delay alignment.

The chain always runs in that order; each step can be switched off.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateStatsError, DomainError, UndefinedMetricError
from .metrics import compute_ccc
from .tensor import reduce_moments

STEPS = ("sn", "mf", "td")


@dataclass(frozen=True)
class TrainStats:
    label_mean: float
    label_std: float
    pred_mean: float

    def __post_init__(self):
        if not self.label_std > 0:
            raise DegenerateStatsError(f"label std must be positive, got {self.label_std}")


@dataclass(frozen=True)
class DelayResult:
    best_t: int
    aligned_length: int
    ccc_at_best: float


def fit_train_stats(train_labels, train_preds) -> TrainStats:
    labels = np.asarray(train_labels, dtype=np.float64).ravel()
    preds = np.asarray(train_preds, dtype=np.float64).ravel()
    if labels.size == 0 or preds.size == 0:
        raise DomainError("cannot fit statistics on an empty training split")
    mean, var = reduce_moments(labels)
    if var <= 0:
        raise DegenerateStatsError("training labels are constant; label std is zero")
    pred_mean, _ = reduce_moments(preds)
    return TrainStats(mean, float(np.sqrt(var)), pred_mean)


def scale_normalize(preds, stats: TrainStats):
    return (np.asarray(preds, dtype=np.float64) - stats.label_mean) / stats.label_std


def mean_filter(preds, stats: TrainStats, swapped=False):
    """Shift by (pred_mean - label_mean) as written; ``swapped`` shifts the other way."""
    p = np.asarray(preds, dtype=np.float64)
    if swapped:
        return p - stats.pred_mean + stats.label_mean
    return p - stats.label_mean + stats.pred_mean


def shift_pair(labels, preds, t: int):
    """Overlap of labels[f] with preds[f + t]."""
    n = len(labels)
    lo, hi = max(0, -t), min(n, n - t)
    return np.asarray(labels[lo:hi]), np.asarray(preds[lo + t:hi + t])


def time_delay_align(labels, preds, t_range=(-10, 10)) -> DelayResult:
    labels = np.asarray(labels, dtype=np.float64).ravel()
    preds = np.asarray(preds, dtype=np.float64).ravel()
    if labels.shape != preds.shape:
        raise DomainError("labels and predictions differ in length")
    lo, hi = int(t_range[0]), int(t_range[1])
    if lo > hi:
        raise ConfigError(f"empty delay range {t_range}")
    n = labels.size
    if n <= 2 * max(abs(lo), abs(hi)):
        raise DomainError(f"series of length {n} too short for delays in [{lo}, {hi}]")
    best = None
    # visit |t| ascending, negative first, so strict > keeps the preferred tie winner
    for t in sorted(range(lo, hi + 1), key=lambda v: (abs(v), v)):
        y, p = shift_pair(labels, preds, t)
        try:
            score = compute_ccc(y, p)
        except UndefinedMetricError:
            continue
        if best is None or score > best[1]:
            best = (t, score)
    if best is None:
        raise UndefinedMetricError("CCC undefined at every candidate delay")
    t, score = best
    return DelayResult(t, n - abs(t), score)


def apply_chain(preds, stats: TrainStats | None, steps=STEPS, labels=None, swapped_mean=False,
                t_range=(-10, 10)):
    """Run the enabled steps in fixed order.

    Returns (repaired predictions, labels aligned to them, DelayResult or None).
    Time delay drops samples outside the overlap.
    """
    unknown = set(steps) - set(STEPS)
    if unknown:
        raise ConfigError(f"unknown post-processing steps {sorted(unknown)}")
    p = np.asarray(preds, dtype=np.float64)
    if ("sn" in steps or "mf" in steps) and stats is None:
        raise ConfigError("scale normalization and mean filtering need training statistics")
    if "sn" in steps:
        p = scale_normalize(p, stats)
    if "mf" in steps:
        p = mean_filter(p, stats, swapped=swapped_mean)
    y = None if labels is None else np.asarray(labels, dtype=np.float64)
    delay = None
    if "td" in steps:
        if y is None:
            raise ConfigError("time-delay alignment needs labels")
        delay = time_delay_align(y, p, t_range)
        y, p = shift_pair(y, p, delay.best_t)
    return p, y, delay


def write_stats_csv(path, stats: dict):
    from .storage import atomic_write_text

    lines = ["target,label_mean,label_std,pred_mean"]
    for target, s in stats.items():
        lines.append(f"{target},{s.label_mean:.17g},{s.label_std:.17g},{s.pred_mean:.17g}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_stats_csv(path) -> dict:
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["target", "label_mean", "label_std", "pred_mean"]:
            raise ConfigError(f"{path}: unexpected stats header {reader.fieldnames}")
        for row in reader:
            out[row["target"]] = TrainStats(float(row["label_mean"]), float(row["label_std"]),
                                            float(row["pred_mean"]))
    return out
