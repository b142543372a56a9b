"""MAE, MAPE, PCC and CCC over aligned label/prediction series.

Variances are population (divide-by-n) variances throughout.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, UndefinedMetricError

DEFAULT_MAPE_EPSILON = 1e-3


def _pair(y, y_pred, min_len=1):
    y = np.asarray(y, dtype=np.float64).ravel()
    p = np.asarray(y_pred, dtype=np.float64).ravel()
    if y.shape != p.shape:
        raise DimensionError(f"labels ({y.size}) and predictions ({p.size}) differ in length")
    if y.size < min_len:
        raise UndefinedMetricError(f"need at least {min_len} samples, got {y.size}")
    return y, p


def compute_mae(y, y_pred) -> float:
    y, p = _pair(y, y_pred)
    return float(np.mean(np.abs(p - y)))


def compute_mape(y, y_pred, epsilon=DEFAULT_MAPE_EPSILON):
    """Percentage error over labels with |y| >= epsilon; returns (mape, excluded)."""
    y, p = _pair(y, y_pred)
    keep = np.abs(y) >= epsilon
    excluded = int(y.size - keep.sum())
    if not keep.any():
        raise UndefinedMetricError(f"every label is within {epsilon} of zero; MAPE undefined")
    return float(100.0 * np.mean(np.abs(p[keep] - y[keep]) / np.abs(y[keep]))), excluded


def _centered(y, p):
    y, p = _pair(y, p, min_len=2)
    dy = y - y.mean()
    dp = p - p.mean()
    syy = float(np.dot(dy, dy))
    spp = float(np.dot(dp, dp))
    if syy == 0.0 or spp == 0.0:
        raise UndefinedMetricError("correlation undefined: a series has zero variance")
    return y, p, dy, dp, syy, spp


def compute_pcc(y, y_pred) -> float:
    _, _, dy, dp, syy, spp = _centered(y, y_pred)
    r = float(np.dot(dy, dp)) / np.sqrt(syy * spp)
    return float(np.clip(r, -1.0, 1.0))


def compute_ccc(y, y_pred) -> float:
    y, p, dy, dp, syy, spp = _centered(y, y_pred)
    n = y.size
    cov = float(np.dot(dy, dp)) / n
    # 2 rho s_y s_p == 2 cov
    return float(2.0 * cov / (syy / n + spp / n + (y.mean() - p.mean()) ** 2))


@dataclass
class MetricReport:
    target: str
    mae: float
    mape: float
    mape_excluded: int
    pcc: float
    ccc: float
    n: int


def evaluate(y, y_pred, target="", epsilon=DEFAULT_MAPE_EPSILON) -> MetricReport:
    mape, excluded = compute_mape(y, y_pred, epsilon)
    return MetricReport(target, compute_mae(y, y_pred), mape, excluded,
                        compute_pcc(y, y_pred), compute_ccc(y, y_pred), int(np.size(y)))


def report_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["target", "metric", "value", "n", "excluded"])
    for r in reports:
        for name in ("mae", "mape", "pcc", "ccc"):
            excluded = r.mape_excluded if name == "mape" else 0
            w.writerow([r.target, name, f"{getattr(r, name):.9g}", r.n, excluded])
    return buf.getvalue()


def report_table(reports) -> str:
    lines = [f"{'target':<10}{'MAE':>10}{'MAPE%':>10}{'PCC':>10}{'CCC':>10}{'n':>8}"]
    for r in reports:
        lines.append(f"{r.target:<10}{r.mae:>10.4f}{r.mape:>10.2f}{r.pcc:>10.4f}{r.ccc:>10.4f}{r.n:>8d}")
    return "\n".join(lines) + "\n"
