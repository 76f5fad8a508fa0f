"""Residual generation and evaluation for sensor-fault detection.

Covers the state-estimation residual ||y - x_hat|| with learned quantile
thresholds, the second-difference statistic (r_k, R_k), the Gamma-rate beta
residual, logistic-regression scoring of residuals, and ROC/AUC evaluation.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence, TextIO

import numpy as np

from .precision import GammaBelief

__all__ = [
    "ResidualRecord",
    "LogisticModel",
    "Threshold",
    "TrainSettings",
    "ser_residual",
    "ef_fdi",
    "EfFdiTracker",
    "beta_residual",
    "learn_threshold",
    "detect",
    "fit_logistic",
    "predict_prob",
    "roc_auc",
    "RocResult",
    "write_residuals_csv",
    "read_residuals_csv",
    "write_roc_csv",
]

RESIDUAL_CSV_HEADER = ["t", "sensor_id", "ser", "ef_r", "ef_R", "beta", "fault_truth"]


@dataclass(frozen=True)
class ResidualRecord:
    """Per-timestep residual signals for one sensor, with the truth label."""

    t: float
    sensor_id: int
    ser: float
    ef_r: float
    ef_big_r: float
    beta: float
    fault_truth: int

    def __post_init__(self) -> None:
        if self.ser < 0.0 or self.ef_r < 0.0 or self.ef_big_r < 0.0:
            raise ValueError("residuals must be non-negative")
        if self.beta <= 0.0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.fault_truth not in (0, 1):
            raise ValueError(f"fault_truth must be 0 or 1, got {self.fault_truth}")


@dataclass(frozen=True)
class LogisticModel:
    """Scalar logistic classifier p = sigmoid(slope * x + intercept)."""

    slope: float
    intercept: float
    threshold: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")

    def to_dict(self) -> dict:
        return {
            "slope": self.slope,
            "intercept": self.intercept,
            "threshold": self.threshold,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LogisticModel":
        return cls(
            slope=float(d["slope"]),
            intercept=float(d["intercept"]),
            threshold=float(d["threshold"]),
        )


@dataclass(frozen=True)
class Threshold:
    """A residual threshold learned as an empirical quantile of healthy data."""

    value: float
    confidence: float

    def __post_init__(self) -> None:
        if self.value < 0.0:
            raise ValueError(f"threshold value must be >= 0, got {self.value}")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError(f"confidence must lie in (0, 1), got {self.confidence}")


def ser_residual(y: np.ndarray, predicted: np.ndarray) -> float:
    """State-estimation residual ||y - g(mu_x)||.

    `predicted` is the observation predicted from the state estimate.
    """
    r = np.atleast_1d(np.asarray(y, dtype=float)) - np.atleast_1d(
        np.asarray(predicted, dtype=float)
    )
    return float(np.linalg.norm(r))


def ef_fdi(
    y_window: Sequence[np.ndarray | float],
    r_window: Sequence[float],
) -> tuple[float, float]:
    """Second-difference fault statistic.

    r_k = |y_t - 2 y_{t-1} + y_{t-2}| from the last three observations,
    R_k = r_k + r_{k-1} + r_{k-2} with the two previous r values.
    Vector observations use the Euclidean norm of the second difference.
    """
    if len(y_window) != 3:
        raise ValueError("need exactly the last 3 observations")
    if len(r_window) != 2:
        raise ValueError("need exactly the previous 2 r values")
    y2, y1, y0 = (np.atleast_1d(np.asarray(y, dtype=float)) for y in y_window)
    r_k = float(np.linalg.norm(y0 - 2.0 * y1 + y2))
    big_r = r_k + float(r_window[1]) + float(r_window[0])
    return r_k, big_r


class EfFdiTracker:
    """Streaming wrapper around `ef_fdi`; warm-up (first 2 samples) yields None."""

    def __init__(self) -> None:
        self._ys: list[np.ndarray] = []
        self._rs: list[float] = [0.0, 0.0]

    def update(self, y: np.ndarray | float) -> tuple[float, float] | None:
        self._ys.append(np.atleast_1d(np.asarray(y, dtype=float)))
        if len(self._ys) > 3:
            self._ys.pop(0)
        if len(self._ys) < 3:
            return None
        r_k, big_r = ef_fdi(self._ys, self._rs)
        self._rs = [self._rs[1], r_k]
        return r_k, big_r


def beta_residual(belief: GammaBelief) -> float:
    """The Gamma rate parameter used as a fault-detection signal."""
    return belief.beta


def learn_threshold(
    healthy_residuals: Sequence[float], confidence: float = 0.997
) -> Threshold:
    """Nearest-rank empirical quantile of healthy-run residuals."""
    if len(healthy_residuals) == 0:
        raise ValueError("cannot learn a threshold from an empty sample")
    if not 0.0 < confidence < 1.0:
        raise ValueError(f"confidence must lie in (0, 1), got {confidence}")
    ordered = sorted(float(v) for v in healthy_residuals)
    rank = math.ceil(confidence * len(ordered))
    rank = min(max(rank, 1), len(ordered))
    return Threshold(value=ordered[rank - 1], confidence=confidence)


def detect(residual: float, threshold: Threshold) -> bool:
    """True (faulty) iff the residual strictly exceeds the threshold."""
    return residual > threshold.value


@dataclass(frozen=True)
class TrainSettings:
    learning_rate: float = 1.0
    max_iter: int = 2000
    tol: float = 1e-10


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def fit_logistic(
    features: Sequence[float],
    labels: Sequence[int],
    settings: TrainSettings = TrainSettings(),
) -> LogisticModel:
    """Fit a scalar logistic regression by gradient descent on cross-entropy.

    Features are z-scored internally for conditioning; the standardization is
    folded back into the returned (slope, intercept).
    """
    x = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or len(x) == 0:
        raise ValueError("features and labels must be equal-length 1-D sequences")
    if not np.all(np.isfinite(x)):
        raise ValueError("features must be finite")
    if not (np.any(y == 0.0) and np.any(y == 1.0)):
        raise ValueError("both classes must be present in the labels")
    mu = float(np.mean(x))
    sd = float(np.std(x))
    if sd == 0.0:
        sd = 1.0
    z = (x - mu) / sd
    w = 0.0
    w0 = 0.0
    prev_loss = math.inf
    for _ in range(settings.max_iter):
        p = _sigmoid(w * z + w0)
        eps = 1e-12
        loss = float(-np.mean(y * np.log(p + eps) + (1.0 - y) * np.log(1.0 - p + eps)))
        grad_w = float(np.mean((p - y) * z))
        grad_w0 = float(np.mean(p - y))
        w -= settings.learning_rate * grad_w
        w0 -= settings.learning_rate * grad_w0
        if abs(prev_loss - loss) < settings.tol:
            break
        prev_loss = loss
    return LogisticModel(slope=w / sd, intercept=w0 - w * mu / sd)


def predict_prob(model: LogisticModel, x: float | np.ndarray) -> float | np.ndarray:
    """sigmoid(slope * x + intercept)."""
    z = np.asarray(model.slope * np.asarray(x, dtype=float) + model.intercept)
    p = _sigmoid(np.atleast_1d(z))
    return float(p[0]) if z.ndim == 0 else p


@dataclass(frozen=True)
class RocResult:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> RocResult:
    """ROC curve over all score thresholds and trapezoid AUC.

    Tied scores collapse to one curve point, which makes the trapezoid AUC
    equal to the Mann-Whitney statistic with ties counted one half.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=int)
    if s.shape != y.shape or s.ndim != 1 or len(s) == 0:
        raise ValueError("scores and labels must be equal-length 1-D sequences")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both classes must be present in the labels")
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    tps = np.cumsum(y_sorted == 1)
    fps = np.cumsum(y_sorted == 0)
    # Keep only the last index of each tied-score group.
    distinct = np.r_[np.nonzero(np.diff(s_sorted))[0], len(s_sorted) - 1]
    tpr = np.r_[0.0, tps[distinct] / n_pos]
    fpr = np.r_[0.0, fps[distinct] / n_neg]
    thresholds = np.r_[np.inf, s_sorted[distinct]]
    auc = float(np.trapezoid(tpr, fpr))
    return RocResult(fpr=fpr, tpr=tpr, thresholds=thresholds, auc=auc)


def _fmt(v: float) -> str:
    return f"{v:.12g}"


def write_residuals_csv(records: Iterable[ResidualRecord], stream: TextIO) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(RESIDUAL_CSV_HEADER)
    for rec in records:
        writer.writerow(
            [
                _fmt(rec.t),
                rec.sensor_id,
                _fmt(rec.ser),
                _fmt(rec.ef_r),
                _fmt(rec.ef_big_r),
                _fmt(rec.beta),
                rec.fault_truth,
            ]
        )


def read_residuals_csv(stream: TextIO) -> list[ResidualRecord]:
    reader = csv.reader(stream)
    header = next(reader)
    if header != RESIDUAL_CSV_HEADER:
        raise ValueError(f"unexpected residual CSV header: {header}")
    return [
        ResidualRecord(
            t=float(row[0]),
            sensor_id=int(row[1]),
            ser=float(row[2]),
            ef_r=float(row[3]),
            ef_big_r=float(row[4]),
            beta=float(row[5]),
            fault_truth=int(row[6]),
        )
        for row in reader
    ]


def write_roc_csv(roc: RocResult, stream: TextIO) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["fpr", "tpr", "threshold"])
    for f, t, thr in zip(roc.fpr, roc.tpr, roc.thresholds):
        writer.writerow([_fmt(f), _fmt(t), _fmt(thr)])
