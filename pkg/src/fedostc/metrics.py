"""Forecast error metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyInputError, LengthMismatchError


def _errors(pred, truth) -> np.ndarray:
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise LengthMismatchError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if pred.size == 0:
        raise EmptyInputError("no values to score")
    return (pred - truth).ravel()


def rmse(pred, truth) -> float:
    err = _errors(pred, truth)
    return float(np.sqrt(np.mean(err * err)))


def mae(pred, truth) -> float:
    return float(np.mean(np.abs(_errors(pred, truth))))


def generalization_variance(per_client_rmse) -> float:
    """Population variance of per-client RMSE values."""
    values = np.asarray(per_client_rmse, dtype=float).ravel()
    if values.size == 0:
        raise EmptyInputError("no per-client values")
    return float(np.var(values))


@dataclass
class MetricSummary:
    method: str
    horizon: int
    rmse: float
    mae: float
    per_client_rmse: np.ndarray
    rmse_variance: float

    def as_dict(self) -> dict:
        return {
            "method": self.method,
            "horizon": self.horizon,
            "rmse": self.rmse,
            "mae": self.mae,
            "per_client_rmse": [float(v) for v in self.per_client_rmse],
            "rmse_variance": self.rmse_variance,
        }


def summarize(method: str, horizon: int, sq_errors, abs_errors) -> MetricSummary:
    """Summarize accumulated ``(rounds, N, F)`` squared and absolute errors."""
    sq = np.asarray(sq_errors, dtype=float)
    ab = np.asarray(abs_errors, dtype=float)
    if sq.size == 0:
        raise EmptyInputError("no rounds recorded")
    per_client = np.sqrt(sq.mean(axis=(0, 2)))
    return MetricSummary(method, horizon, float(np.sqrt(sq.mean())), float(ab.mean()),
                         per_client, generalization_variance(per_client))
