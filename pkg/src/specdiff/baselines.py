"""Trivial internal comparators for acceptance runs.

Persistence repeats the last observed value across the horizon; the
Gaussian variant wraps it in a fixed-width predictive distribution so that
probabilistic scores have a sane reference point.
"""

from __future__ import annotations

import numpy as np

from .data import SeriesWindow, StgDataset, denormalize_values
from .diffusion import ForecastResult
from .errors import ConfigError


def persistence_forecast(ds: StgDataset, window: SeriesWindow) -> ForecastResult:
    """Repeat each sensor's last context value over the horizon."""
    last = denormalize_values(window.context[:, -1], ds.stats)
    pred = np.repeat(last[:, None], window.horizon, axis=1)
    return ForecastResult(
        window_start=window.future_start,
        samples=pred[None],
        spectral_means=np.zeros_like(pred),
        predictions=pred,
    )


def persistence_width(ds: StgDataset, train_split: tuple[int, int]) -> float:
    """Fixed predictive width: std of one-step differences on the train range."""
    a, b = train_split
    if b - a < 2:
        raise ConfigError("train split too short to estimate a persistence width")
    diffs = np.diff(ds.values[:, a:b], axis=1)
    return float(diffs.std())


def gaussian_persistence_forecast(
    ds: StgDataset,
    window: SeriesWindow,
    num_samples: int,
    width: float,
    seed: int,
) -> ForecastResult:
    """Persistence center with fixed-width Gaussian samples around it."""
    base = persistence_forecast(ds, window)
    rng = np.random.default_rng(np.random.SeedSequence([seed, window.future_start]))
    noise = rng.normal(0.0, width, size=(num_samples,) + base.predictions.shape)
    return ForecastResult(
        window_start=base.window_start,
        samples=base.predictions[None] + noise,
        spectral_means=base.spectral_means,
        predictions=base.predictions,
    )
