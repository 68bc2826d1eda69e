"""Horizon-wise error metrics in vehicle units, overall and for congested periods."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import WindowedDataset
from .models import Model
from .training import predict_split


class MetricError(ValueError):
    """A metric is undefined for the given inputs."""


def _pair(y, yhat) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64).ravel()
    yhat = np.asarray(yhat, dtype=np.float64).ravel()
    if y.shape != yhat.shape:
        raise MetricError(f"length mismatch: {y.size} targets vs {yhat.size} predictions")
    if y.size == 0:
        raise MetricError("no samples")
    return y, yhat


def rmse(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.sqrt(np.mean((y - yhat) ** 2)))


def mape(y, yhat, return_excluded: bool = False):
    """Mean absolute percentage error in percent, skipping zero targets.

    With ``return_excluded`` the number of skipped samples is returned too.
    """
    y, yhat = _pair(y, yhat)
    keep = y != 0
    if not keep.any():
        raise MetricError("MAPE is undefined when every target is zero")
    value = float(np.mean(np.abs((y[keep] - yhat[keep]) / y[keep])) * 100.0)
    return (value, int((~keep).sum())) if return_excluded else value


def congested_mask(flow, method: str = "percentile", percentile: float = 85.0,
                   times=None, windows: tuple[tuple[float, float], ...] = ((7.0, 9.0), (16.0, 19.0))
                   ) -> np.ndarray:
    """Flag congested steps.

    ``percentile``: true flow at or above the given percentile of ``flow``.
    ``clock``: timestamp (epoch seconds, UTC) falls inside one of the
    half-open hour-of-day ``windows``.
    """
    flow = np.asarray(flow, dtype=np.float64)
    if method == "percentile":
        if not 0.0 <= percentile <= 100.0:
            raise MetricError(f"percentile must be in [0, 100], got {percentile}")
        return flow >= np.percentile(flow, percentile)
    if method == "clock":
        if times is None:
            raise MetricError("clock-window congestion needs timestamps")
        hours = (np.asarray(times, dtype=np.int64) % 86400) / 3600.0
        mask = np.zeros(hours.shape, dtype=bool)
        for lo, hi in windows:
            mask |= (hours >= lo) & (hours < hi)
        return mask
    raise MetricError(f"unknown congestion method {method!r}")


@dataclass
class EvalReport:
    rmse_h: list[float]
    mape_h: list[float]
    rmse: float
    mape: float
    congested_rmse_h: list[float]
    congested_count_h: list[int]
    count_h: list[int]
    mape_excluded: int
    normalized_mse: float
    y_true: np.ndarray = field(repr=False)
    y_pred: np.ndarray = field(repr=False)

    @property
    def lead(self) -> int:
        return len(self.rmse_h)

    def write(self, out_dir: str | Path) -> None:
        """Write ``report.txt``, ``horizons.csv`` and ``predictions.csv``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.txt", "w") as fh:
            for k, v in self.summary().items():
                fh.write(f"{k} = {v!r}\n" if isinstance(v, float) else f"{k} = {v}\n")
        with open(out / "horizons.csv", "w") as fh:
            fh.write("horizon,rmse,mape,congested_rmse,count,congested_count\n")
            for h in range(self.lead):
                fh.write(f"{h + 1},{self.rmse_h[h]!r},{self.mape_h[h]!r},"
                         f"{self.congested_rmse_h[h]!r},{self.count_h[h]},"
                         f"{self.congested_count_h[h]}\n")
        write_predictions(self.y_true, self.y_pred, out / "predictions.csv")

    def summary(self) -> dict:
        out = {"lead": self.lead, "rmse": self.rmse, "mape": self.mape,
               "normalized_mse": self.normalized_mse, "mape_excluded": self.mape_excluded}
        for h in range(self.lead):
            out[f"rmse_{h + 1}"] = self.rmse_h[h]
            out[f"mape_{h + 1}"] = self.mape_h[h]
            out[f"congested_rmse_{h + 1}"] = self.congested_rmse_h[h]
            out[f"congested_count_{h + 1}"] = self.congested_count_h[h]
        return out


def write_predictions(y_true: np.ndarray, y_pred: np.ndarray, path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write("example_index,horizon,y_true,y_pred\n")
        for i in range(y_true.shape[0]):
            for h in range(y_true.shape[1]):
                fh.write(f"{i},{h + 1},{float(y_true[i, h])!r},{float(y_pred[i, h])!r}\n")


def read_predictions(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    n, lead = int(rows[:, 0].max()) + 1, int(rows[:, 1].max())
    y_true = np.empty((n, lead))
    y_pred = np.empty((n, lead))
    idx, h = rows[:, 0].astype(int), rows[:, 1].astype(int) - 1
    y_true[idx, h] = rows[:, 2]
    y_pred[idx, h] = rows[:, 3]
    return y_true, y_pred


def report_from_arrays(y_true: np.ndarray, y_pred: np.ndarray, mask: np.ndarray,
                       normalized_mse: float = float("nan")) -> EvalReport:
    """Metrics for de-normalized ``n x lead`` targets and (already clamped) predictions."""
    if y_true.shape != y_pred.shape or y_true.ndim != 2:
        raise MetricError(f"targets {y_true.shape} and predictions {y_pred.shape} differ")
    if y_true.shape[0] == 0:
        raise MetricError("empty evaluation split")
    lead = y_true.shape[1]
    rmse_h, mape_h, c_rmse, c_count = [], [], [], []
    for h in range(lead):
        rmse_h.append(rmse(y_true[:, h], y_pred[:, h]))
        mape_h.append(mape(y_true[:, h], y_pred[:, h]))
        m = mask[:, h]
        c_count.append(int(m.sum()))
        c_rmse.append(rmse(y_true[m, h], y_pred[m, h]) if m.any() else float("nan"))
    overall_mape, excluded = mape(y_true, y_pred, return_excluded=True)
    return EvalReport(rmse_h, mape_h, rmse(y_true, y_pred), overall_mape, c_rmse, c_count,
                      [y_true.shape[0]] * lead, excluded, normalized_mse, y_true, y_pred)


def evaluate(model: Model, ds: WindowedDataset, split: str = "test",
             method: str = "percentile", percentile: float = 85.0) -> EvalReport:
    """Predict a split, undo the flow scaling, clamp at zero and score each horizon."""
    if ds.norm is None:
        raise MetricError("dataset carries no normalization parameters")
    x, dx, y = ds.arrays(split)
    if len(y) == 0:
        raise MetricError(f"{split} split is empty")
    pred = predict_split(model, x, dx if model.variant.merged else None)
    normalized_mse = float(np.mean((pred - y) ** 2))
    y_true = ds.arrays(split, normalized=False)[2]
    y_pred = np.maximum(ds.norm.inverse_flow(pred), 0.0)
    if method == "percentile":
        mask = congested_mask(y_true, "percentile", percentile)
    else:
        mask = congested_mask(y_true, method, percentile, times=ds.target_times(split))
    return report_from_arrays(y_true, y_pred, mask, normalized_mse)
