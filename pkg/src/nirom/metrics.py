"""Scoring of predictions against truth in the high-fidelity space."""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, NonFiniteValuesError, ZeroNormError
from .snapstore import SnapshotSet


@dataclass(frozen=True)
class ErrorSeries:
    """Per-time spatial RMSE and relative L2 error, aggregate and per field."""

    times: np.ndarray
    rmse: np.ndarray
    rel_err: np.ndarray
    per_field: dict  # name -> {"rmse": array, "rel_err": array}

    def __post_init__(self):
        if not (np.isfinite(self.rmse).all() and np.isfinite(self.rel_err).all()):
            raise NonFiniteValuesError("error series contains non-finite values")


def _check_pair(truth: SnapshotSet, pred: SnapshotSet) -> None:
    if truth.data.shape != pred.data.shape:
        raise DimensionMismatchError(
            f"shape mismatch: truth {truth.data.shape} vs prediction {pred.data.shape}"
        )
    if not np.allclose(truth.times, pred.times, rtol=1e-9, atol=1e-12):
        raise DimensionMismatchError("truth and prediction time stamps differ")
    if truth.fields != pred.fields:
        raise DimensionMismatchError("truth and prediction field layouts differ")


def spatial_rmse(truth: SnapshotSet, pred: SnapshotSet) -> ErrorSeries:
    """RMSE(t_k) = sqrt(sum_i (x_i - x~_i)^2 / N), per field and aggregate."""
    _check_pair(truth, pred)
    diff = pred.data - truth.data
    sq = diff * diff

    def _series(block_sq, block_truth):
        n = block_sq.shape[0]
        rmse = np.sqrt(block_sq.sum(axis=0) / n)
        norms = np.sqrt((block_truth * block_truth).sum(axis=0))
        err = np.sqrt(block_sq.sum(axis=0))
        with np.errstate(divide="ignore", invalid="ignore"):
            rel = np.where(norms > 0.0, err / norms, np.where(err > 0.0, np.inf, 0.0))
        if not np.isfinite(rel).all():
            raise ZeroNormError("relative error undefined: zero-norm truth column")
        return rmse, rel

    agg_rmse, agg_rel = _series(sq, truth.data)
    per_field = {}
    for f in truth.fields:
        r, e = _series(sq[f.rows(), :], truth.data[f.rows(), :])
        per_field[f.name] = {"rmse": r, "rel_err": e}
    return ErrorSeries(truth.times.copy(), agg_rmse, agg_rel, per_field)


def relative_error(truth: SnapshotSet, pred: SnapshotSet, t: float) -> float:
    """||truth - pred||_2 / ||truth||_2 at the column closest to time t."""
    _check_pair(truth, pred)
    k = int(np.argmin(np.abs(truth.times - t)))
    span = max(abs(float(truth.times[0])), abs(float(truth.times[-1])), 1.0)
    if abs(truth.times[k] - t) > 1e-9 * span:
        raise DimensionMismatchError(f"no snapshot at time {t}")
    denom = float(np.linalg.norm(truth.data[:, k]))
    if denom == 0.0:
        raise ZeroNormError(f"truth column at t={t} has zero norm")
    return float(np.linalg.norm(pred.data[:, k] - truth.data[:, k]) / denom)


def mse(truth, pred) -> float:
    """Mean squared entrywise difference; accepts arrays or snapshot sets."""
    a = truth.data if isinstance(truth, SnapshotSet) else np.asarray(truth)
    b = pred.data if isinstance(pred, SnapshotSet) else np.asarray(pred)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.mean(d * d))


def to_csv(series: ErrorSeries, path=None) -> str:
    """Plot-ready CSV: time, field, rmse, rel_err (field "all" = aggregate)."""
    buf = io.StringIO()
    buf.write("time,field,rmse,rel_err\n")
    for k, t in enumerate(series.times):
        t_, r_, e_ = float(t), float(series.rmse[k]), float(series.rel_err[k])
        buf.write(f"{t_!r},all,{r_!r},{e_!r}\n")
        for name, vals in series.per_field.items():
            fr, fe = float(vals["rmse"][k]), float(vals["rel_err"][k])
            buf.write(f"{t_!r},{name},{fr!r},{fe!r}\n")
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text
