"""Probabilistic spatio-temporal graph forecasting in the spectral domain.

The package trains a denoising diffusion model on graph-Fourier
representations of sensor time series and samples autoregressive
probabilistic forecasts from it.  See the README for the CLI workflow.
"""

from .diffusion import (
    ForecastResult,
    NoiseSchedule,
    TrainerConfig,
    TrainResult,
    forecast,
    forecast_windows,
    forward_corrupt,
    quadratic_schedule,
    sample_step,
    train,
    training_loss,
)
from .graph import (
    FourierBasis,
    StgGraph,
    build_graph,
    eigendecompose,
    fourier_reconstruct,
    fourier_transform,
    fourier_transform_multivariate,
    normalized_laplacian,
)
from .data import SeriesWindow, SpectralWindow, StgDataset, load_dataset, synth_dataset
from .metrics import EvalReport, crps_avg, crps_empirical, crps_normalized, evaluate, mae, rmse

__version__ = "0.1.0"

__all__ = [
    "EvalReport",
    "ForecastResult",
    "FourierBasis",
    "NoiseSchedule",
    "SeriesWindow",
    "SpectralWindow",
    "StgDataset",
    "StgGraph",
    "TrainResult",
    "TrainerConfig",
    "build_graph",
    "crps_avg",
    "crps_empirical",
    "crps_normalized",
    "eigendecompose",
    "evaluate",
    "forecast",
    "forecast_windows",
    "forward_corrupt",
    "fourier_reconstruct",
    "fourier_transform",
    "fourier_transform_multivariate",
    "load_dataset",
    "mae",
    "normalized_laplacian",
    "quadratic_schedule",
    "rmse",
    "sample_step",
    "synth_dataset",
    "train",
    "training_loss",
    "__version__",
]
