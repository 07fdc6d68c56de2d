"""Deterministic and probabilistic forecast evaluation.

RMSE and MAE reduce the node axis inside each per-step term (the per-step
value is the root/mean over sensors) and then average the steps of the
window.  CRPS is approximated from empirical sample quantiles at 19 levels
(0.05 .. 0.95) with linear interpolation, and reported in its normalized
forms: per time point, the node-summed CRPS divided by the node-summed
absolute truth; averaged, the same ratio over all steps and nodes.

All functions are pure; metrics are computed on original-unit values.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentError, ShapeError, UsageError

QUANTILE_LEVELS = np.arange(1, 20) * 0.05


def _check_pair(pred: np.ndarray, truth: np.ndarray) -> None:
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if pred.ndim != 2:
        raise ShapeError(f"expected N x f matrices, got shape {pred.shape}")


def rmse(pred: np.ndarray, truth: np.ndarray) -> tuple[float, np.ndarray]:
    """Window RMSE plus the per-step vector sqrt(mean over nodes of err^2)."""
    _check_pair(pred, truth)
    sq = np.mean((pred - truth) ** 2, axis=0)
    return float(np.sqrt(np.mean(sq))), np.sqrt(sq)


def mae(pred: np.ndarray, truth: np.ndarray) -> tuple[float, np.ndarray]:
    """Window MAE plus the per-step vector mean over nodes of |err|."""
    _check_pair(pred, truth)
    ab = np.mean(np.abs(pred - truth), axis=0)
    return float(np.mean(ab)), ab


def crps_empirical(samples: np.ndarray, x: float) -> float:
    """Quantile-loss CRPS of one sample set against one observation."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1 or samples.shape[0] < 2:
        raise UsageError("crps_empirical needs a 1-D sample set with at least 2 draws")
    q = np.quantile(samples, QUANTILE_LEVELS)
    ind = (x < q).astype(np.float64)
    vals = (QUANTILE_LEVELS - ind) * (x - q)
    return float(2.0 / QUANTILE_LEVELS.shape[0] * vals.sum())


def crps_field(samples: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Vectorized CRPS: ``samples`` is (S, ...), ``truth`` matches the tail."""
    samples = np.asarray(samples, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if samples.shape[1:] != truth.shape:
        raise ShapeError(f"samples {samples.shape} do not cover truth {truth.shape}")
    if samples.shape[0] < 2:
        raise UsageError("need at least 2 samples for CRPS")
    q = np.quantile(samples, QUANTILE_LEVELS, axis=0)
    lv = QUANTILE_LEVELS.reshape((-1,) + (1,) * truth.ndim)
    ind = (truth[None] < q).astype(np.float64)
    vals = (lv - ind) * (truth[None] - q)
    return 2.0 / QUANTILE_LEVELS.shape[0] * vals.sum(axis=0)


def crps_normalized(samples: np.ndarray, truth: np.ndarray) -> float:
    """Node-summed CRPS over node-summed |truth| for one time point.

    Returns NaN when the denominator vanishes; callers exclude those time
    points from averages and report the count.
    """
    per_node = crps_field(samples, truth)
    denom = float(np.abs(truth).sum())
    if denom == 0.0:
        return math.nan
    return float(per_node.sum() / denom)


def crps_avg(samples: np.ndarray, truth: np.ndarray) -> float:
    """Aggregate normalized CRPS over all steps and nodes of a window."""
    per_cell = crps_field(samples, truth)
    denom = float(np.abs(truth).sum())
    if denom == 0.0:
        return math.nan
    return float(per_cell.sum() / denom)


@dataclass
class EvalReport:
    """Averaged metrics plus point values at fixed horizons.

    ``*_points`` map minutes (e.g. 15/30/60) to the metric at the matching
    forecast step.  ``per_window`` holds one row per evaluated window:
    ``(window_start, rmse, mae, crps_avg)``.
    """

    rmse_avg: float
    mae_avg: float
    crps_avg: float
    rmse_points: dict[int, float] = field(default_factory=dict)
    mae_points: dict[int, float] = field(default_factory=dict)
    crps_points: dict[int, float] = field(default_factory=dict)
    per_window: list[tuple[int, float, float, float]] = field(default_factory=list)
    undefined_crps_steps: int = 0
    num_windows: int = 0
    num_samples: int = 0


def evaluate(
    results: list,
    truths: list[np.ndarray],
    interval_minutes: int = 5,
    point_minutes: tuple[int, ...] = (15, 30, 60),
) -> EvalReport:
    """Average metrics over aligned (forecast, truth) pairs.

    ``results`` objects need ``predictions`` (N x f), ``samples`` (S x N x f)
    and ``window_start`` attributes.  CRPS columns stay NaN for sample
    counts below 2 (deterministic baselines).
    """
    if len(results) != len(truths):
        raise AlignmentError(
            f"{len(results)} forecasts vs {len(truths)} truth windows"
        )
    if not results:
        raise AlignmentError("nothing to evaluate")
    horizon = truths[0].shape[1]
    point_idx = {
        m: m // interval_minutes - 1
        for m in point_minutes
        if m % interval_minutes == 0 and 1 <= m // interval_minutes <= horizon
    }

    rmse_vals, mae_vals, crps_vals = [], [], []
    rmse_t = np.zeros(horizon)
    mae_t = np.zeros(horizon)
    crps_t_sum = np.zeros(horizon)
    crps_t_count = np.zeros(horizon, dtype=np.int64)
    per_window = []
    undefined = 0
    with_crps = all(r.samples.shape[0] >= 2 for r in results)

    for r, truth in zip(results, truths):
        if r.predictions.shape != truth.shape:
            raise AlignmentError(
                f"window {r.window_start}: forecast shape {r.predictions.shape} "
                f"!= truth shape {truth.shape}"
            )
        w_rmse, v_rmse = rmse(r.predictions, truth)
        w_mae, v_mae = mae(r.predictions, truth)
        rmse_vals.append(w_rmse)
        mae_vals.append(w_mae)
        rmse_t += v_rmse
        mae_t += v_mae
        w_crps = math.nan
        if with_crps:
            w_crps = crps_avg(r.samples, truth)
            if math.isnan(w_crps):
                undefined += 1
            else:
                crps_vals.append(w_crps)
            per_node = crps_field(r.samples, truth)
            denom_t = np.abs(truth).sum(axis=0)
            valid = denom_t > 0.0
            undefined += int((~valid).sum())
            crps_t_sum[valid] += per_node.sum(axis=0)[valid] / denom_t[valid]
            crps_t_count += valid
        per_window.append((r.window_start, w_rmse, w_mae, w_crps))

    n = len(results)
    report = EvalReport(
        rmse_avg=float(np.mean(rmse_vals)),
        mae_avg=float(np.mean(mae_vals)),
        crps_avg=float(np.mean(crps_vals)) if crps_vals else math.nan,
        per_window=per_window,
        undefined_crps_steps=undefined,
        num_windows=n,
        num_samples=int(results[0].samples.shape[0]),
    )
    for m, idx in point_idx.items():
        report.rmse_points[m] = float(rmse_t[idx] / n)
        report.mae_points[m] = float(mae_t[idx] / n)
        if with_crps and crps_t_count[idx] > 0:
            report.crps_points[m] = float(crps_t_sum[idx] / crps_t_count[idx])
        else:
            report.crps_points[m] = math.nan
    return report


def report_to_csv(report: EvalReport, path: str) -> None:
    minutes = sorted(report.rmse_points)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "avg"] + [f"{m}min" for m in minutes])
        for name, avg, points in (
            ("rmse", report.rmse_avg, report.rmse_points),
            ("mae", report.mae_avg, report.mae_points),
            ("crps", report.crps_avg, report.crps_points),
        ):
            writer.writerow([name, repr(avg)] + [repr(points[m]) for m in minutes])


def per_window_to_csv(report: EvalReport, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["window_start", "rmse", "mae", "crps_avg"])
        for row in report.per_window:
            writer.writerow([row[0]] + [repr(v) for v in row[1:]])


def report_to_text(report: EvalReport) -> str:
    minutes = sorted(report.rmse_points)
    header = ["metric", "avg"] + [f"{m}min" for m in minutes]
    rows = [
        ["RMSE", report.rmse_avg] + [report.rmse_points[m] for m in minutes],
        ["MAE", report.mae_avg] + [report.mae_points[m] for m in minutes],
        ["CRPS", report.crps_avg] + [report.crps_points[m] for m in minutes],
    ]
    lines = ["  ".join(f"{h:>10}" for h in header)]
    for row in rows:
        cells = [f"{row[0]:>10}"] + [f"{v:10.4f}" for v in row[1:]]
        lines.append("  ".join(cells))
    lines.append(
        f"windows={report.num_windows} samples={report.num_samples} "
        f"undefined_crps_steps={report.undefined_crps_steps}"
    )
    return "\n".join(lines)
