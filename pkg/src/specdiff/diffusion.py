"""Noise schedule, forward corruption, training, and ancestral sampling.

Training follows the standard simplified denoising objective: for each
future time point draw a step ``k`` and a noise vector, corrupt the clean
spectral value, and regress the denoiser output onto the injected noise.
Sampling runs the learned reverse chain per future time point, averages the
sample set into a spectral mean, reconstructs it to the original domain, and
feeds the mean back into the recurrent encoder before forecasting the next
point.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .data import (
    SeriesWindow,
    SpectralWindow,
    StgDataset,
    denormalize_values,
    feature_scales,
    make_windows,
    split_and_normalize,
    to_spectral,
)
from .errors import ConfigError, NumericError, UsageError
from .graph import FourierBasis
from .nn import ModelParams

VAL_STREAM = 0x56414C  # fixed tag so validation draws repeat across epochs
CHAIN_STREAM = 0x534D50


@dataclass
class NoiseSchedule:
    """Per-step noise levels and derived quantities.

    ``beta`` holds the forward variances (strictly increasing in the
    quadratic scheme), ``alpha_bar`` their running products of ``1 - beta``,
    and ``sigma`` the reverse-kernel standard deviations.  Step indices are
    1-based throughout the public API.
    """

    beta: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    @property
    def num_steps(self) -> int:
        return self.beta.shape[0]

    def check_step(self, k: int | np.ndarray) -> None:
        ks = np.asarray(k)
        if ks.size == 0 or np.any(ks < 1) or np.any(ks > self.num_steps):
            raise UsageError(f"diffusion step {k} outside [1, {self.num_steps}]")


def quadratic_schedule(
    num_steps: int,
    beta_start: float,
    beta_end: float,
    sigma_mode: str = "sqrt_beta",
) -> NoiseSchedule:
    """Quadratic noise levels: sqrt(beta) interpolates linearly from
    sqrt(beta_start) to sqrt(beta_end)."""
    if num_steps < 2:
        raise ConfigError(f"need at least 2 diffusion steps, got {num_steps}")
    if not (0.0 < beta_start < beta_end < 1.0):
        raise ConfigError(
            f"need 0 < beta_start < beta_end < 1, got ({beta_start}, {beta_end})"
        )
    k = np.arange(num_steps, dtype=np.float64)
    root = math.sqrt(beta_start) + k / (num_steps - 1) * (
        math.sqrt(beta_end) - math.sqrt(beta_start)
    )
    beta = root**2
    alpha_bar = np.cumprod(1.0 - beta)
    if sigma_mode == "sqrt_beta":
        sigma = np.sqrt(beta)
    elif sigma_mode == "zero":
        sigma = np.zeros_like(beta)
    else:
        raise ConfigError(f"unknown sigma_mode {sigma_mode!r}")
    return NoiseSchedule(beta=beta, alpha_bar=alpha_bar, sigma=sigma)


def forward_corrupt(
    sched: NoiseSchedule, x0: np.ndarray, k: int | np.ndarray, eps: np.ndarray
) -> np.ndarray:
    """Closed-form forward marginal draw:
    ``sqrt(alpha_bar_k) x0 + sqrt(1 - alpha_bar_k) eps``.

    ``k`` may be a scalar or one step per leading batch entry of ``x0``.
    """
    sched.check_step(k)
    ab = sched.alpha_bar[np.asarray(k) - 1]
    if np.ndim(ab) > 0:
        ab = ab.reshape(ab.shape + (1,) * (x0.ndim - np.ndim(ab)))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class TrainerConfig:
    """Every knob of a training / forecasting run.

    Defaults mirror the reference setup this package targets: quadratic
    noise from 1e-4, 8 residual blocks of 8 channels, 100-sample forecasts,
    and 12-step context/horizon windows of 5-minute data.
    """

    context_len: int = 12
    horizon: int = 12
    diffusion_steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.3
    sigma_mode: str = "sqrt_beta"
    hidden_size: int = 64
    num_blocks: int = 8
    residual_channels: int = 8
    cheb_order: int = 3
    embed_dim: int = 64
    epochs: int = 100
    batch_size: int = 64
    lr_start: float = 5e-4
    lr_end: float = 1e-2
    warmup_frac: float = 0.1
    num_samples: int = 100
    train_stride: int = 1
    test_stride: int = 1
    loss_over_context: bool = False
    use_day_of_week: bool = True
    use_week_of_month: bool = True
    use_time_of_day: bool = True
    spectral_time_features: bool = True
    weighted_graph: bool = False
    train_frac: float = 0.6
    val_frac: float = 0.2
    interval_minutes: int = 5
    start_timestamp: str = "2018-01-01T00:00:00"
    seed: int = 0

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.context_len < 1 or self.horizon < 1:
            raise ConfigError("context_len and horizon must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        positive = (
            "diffusion_steps hidden_size num_blocks residual_channels cheb_order "
            "embed_dim batch_size num_samples train_stride test_stride "
            "interval_minutes"
        ).split()
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not (0.0 < self.beta_start < self.beta_end < 1.0):
            raise ConfigError("need 0 < beta_start < beta_end < 1")
        for name in ("lr_start", "lr_end"):
            if getattr(self, name) <= 0.0:
                raise ConfigError(f"{name} must be positive")
        if not (0.0 <= self.warmup_frac <= 1.0):
            raise ConfigError("warmup_frac must lie in [0, 1]")
        if self.embed_dim % 2 != 0:
            raise ConfigError("embed_dim must be even")
        if not (0.0 < self.train_frac < 1.0 and 0.0 < self.val_frac < 1.0):
            raise ConfigError("split fractions must lie in (0, 1)")
        if self.train_frac + self.val_frac >= 1.0:
            raise ConfigError("train_frac + val_frac must leave room for the test split")
        if self.sigma_mode not in ("sqrt_beta", "zero"):
            raise ConfigError(f"unknown sigma_mode {self.sigma_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainerConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**doc)

    @property
    def feature_flags(self) -> tuple[bool, bool, bool]:
        return (self.use_day_of_week, self.use_week_of_month, self.use_time_of_day)

    @property
    def num_features(self) -> int:
        return sum(self.feature_flags)

    def schedule(self) -> NoiseSchedule:
        return quadratic_schedule(
            self.diffusion_steps, self.beta_start, self.beta_end, self.sigma_mode
        )


@dataclass
class ForecastResult:
    """Sampled forecast for one window, reconstructed to original units."""

    window_start: int            # absolute index of the first forecast column
    samples: np.ndarray          # (S, N, f) original domain
    spectral_means: np.ndarray   # (N, f) normalized spectral domain
    predictions: np.ndarray      # (N, f) original domain


@dataclass
class TrainResult:
    model: ModelParams
    log: list[tuple[int, float, float, float]]  # (epoch, train, val, seconds)
    best_epoch: int
    best_val: float
    initial_val: float


# ---------------------------------------------------------------------------
# Model input assembly
# ---------------------------------------------------------------------------


def scale_feature_codes(codes: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """Min-max scale integer feature codes onto [0, 1]."""
    if codes.shape[-1] == 0:
        return codes.astype(np.float64)
    return codes.astype(np.float64) / scales


def _feature_block(
    basis: FourierBasis, feat_row: np.ndarray, spectral: bool
) -> np.ndarray:
    """Tile per-step feature values over nodes: ``(..., F) -> (..., N, F)``.

    With ``spectral`` set, the node-constant columns are transformed by the
    basis, i.e. scaled copies of ``U.T @ 1``.
    """
    n = basis.num_nodes
    vec = basis.ones_spectrum() if spectral else np.ones(n)
    return feat_row[..., None, :] * vec[:, None]


def build_encoder_inputs(
    basis: FourierBasis,
    spec_signal: np.ndarray,
    feats_scaled: np.ndarray,
    spectral_features: bool,
) -> list[Tensor]:
    """Per-step encoder inputs ``(..., N, 1 + F)``.

    ``spec_signal`` has shape ``(..., N, L)``; ``feats_scaled`` has shape
    ``(..., L, F)`` aligned on the same ``L`` steps.
    """
    length = spec_signal.shape[-1]
    steps: list[Tensor] = []
    for l in range(length):
        sig = spec_signal[..., l : l + 1]
        block = _feature_block(basis, feats_scaled[..., l, :], spectral_features)
        steps.append(Tensor(np.concatenate([sig, block], axis=-1), _check=False))
    return steps


# ---------------------------------------------------------------------------
# Training objective
# ---------------------------------------------------------------------------


def _batch_loss(
    model: ModelParams,
    basis: FourierBasis,
    sched: NoiseSchedule,
    ctx_spec: np.ndarray,
    fut_spec: np.ndarray,
    feats_scaled: np.ndarray,
    rng: np.random.Generator,
    loss_over_context: bool,
    spectral_features: bool,
) -> Tensor:
    """Mean over windows and time points of the squared noise-prediction
    error (teacher forcing through the encoder)."""
    b, n, c = ctx_spec.shape
    f = fut_spec.shape[-1]
    signal = np.concatenate([ctx_spec, fut_spec[:, :, : f - 1]], axis=-1)
    inputs = build_encoder_inputs(basis, signal, feats_scaled[:, : c + f - 1, :], spectral_features)
    states = nn.run_encoder(model.gru, model.gru_filters, basis, inputs)

    loss_steps: list[tuple[Tensor | None, np.ndarray]] = []
    if loss_over_context:
        zero = nn.zero_state((b,), n, model.gru.hidden_size)
        for l in range(c):
            h_prev = zero if l == 0 else states[l - 1]
            loss_steps.append((h_prev, ctx_spec[:, :, l]))
    for i in range(f):
        loss_steps.append((states[c - 1 + i], fut_spec[:, :, i]))

    total: Tensor | None = None
    k_max = sched.num_steps
    for h_prev, x0 in loss_steps:
        k = rng.integers(1, k_max + 1, size=b)
        eps = rng.standard_normal((b, n))
        x_k = forward_corrupt(sched, x0, k, eps)
        eps_hat = nn.predict_noise(
            model.wave, basis, Tensor(x_k[..., None], _check=False), k, h_prev
        )
        term = ad.mse_loss(eps_hat, Tensor(eps[..., None], _check=False), reduction="sum")
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / (b * len(loss_steps)))


def training_loss(
    model: ModelParams,
    basis: FourierBasis,
    sched: NoiseSchedule,
    window: SpectralWindow,
    feats_scaled: np.ndarray,
    rng: np.random.Generator,
    loss_over_context: bool = False,
    spectral_features: bool = True,
) -> Tensor:
    """Single-window objective; see :func:`_batch_loss` for the batched form."""
    return _batch_loss(
        model,
        basis,
        sched,
        window.context[None],
        window.future[None],
        feats_scaled[None],
        rng,
        loss_over_context,
        spectral_features,
    )


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------


def _window_arrays(
    ds: StgDataset, windows: list[SeriesWindow], config: TrainerConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack spectral windows and scaled feature codes for fast batching."""
    scales = feature_scales(ds, config.feature_flags)
    ctx, fut, feats = [], [], []
    for w in windows:
        spec = to_spectral(ds, w)
        ctx.append(spec.context)
        fut.append(spec.future)
        feats.append(scale_feature_codes(w.time_features, scales))
    return np.stack(ctx), np.stack(fut), np.stack(feats)


def _dataset_loss(
    model: ModelParams,
    basis: FourierBasis,
    sched: NoiseSchedule,
    arrays: tuple[np.ndarray, np.ndarray, np.ndarray],
    rng: np.random.Generator,
    config: TrainerConfig,
    chunk: int = 256,
) -> float:
    """Forward-only objective over a window set (no tape)."""
    ctx, fut, feats = arrays
    total, count = 0.0, 0
    with ad.no_grad():
        for a in range(0, ctx.shape[0], chunk):
            b = min(a + chunk, ctx.shape[0])
            loss = _batch_loss(
                model,
                basis,
                sched,
                ctx[a:b],
                fut[a:b],
                feats[a:b],
                rng,
                config.loss_over_context,
                config.spectral_time_features,
            )
            total += loss.item() * (b - a)
            count += b - a
    return total / count


def train(config: TrainerConfig, ds: StgDataset) -> TrainResult:
    """Optimize the denoiser on the training split, selecting by validation
    loss.  Deterministic given (config, data): fixed init, shuffling, and
    noise draws; validation draws repeat identically every epoch."""
    min_len = config.context_len + config.horizon
    splits, _ = split_and_normalize(
        ds, (config.train_frac, config.val_frac, 1.0 - config.train_frac - config.val_frac),
        min_len=min_len,
    )
    basis = ds.basis()
    flags = config.feature_flags
    train_windows = make_windows(
        ds, splits.train, config.context_len, config.horizon, config.train_stride,
        *flags,
    )
    val_windows = make_windows(
        ds, splits.val, config.context_len, config.horizon, config.train_stride,
        *flags,
    )

    init_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    order_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    draw_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 3]))

    model = nn.init_model(
        init_rng,
        input_channels=1 + config.num_features,
        hidden_size=config.hidden_size,
        num_blocks=config.num_blocks,
        residual_channels=config.residual_channels,
        cheb_order=config.cheb_order,
        num_steps=config.diffusion_steps,
        embed_dim=config.embed_dim,
    )
    sched = config.schedule()

    if config.epochs == 0:
        return TrainResult(model=model, log=[], best_epoch=0, best_val=math.nan,
                           initial_val=math.nan)

    train_arrays = _window_arrays(ds, train_windows, config)
    val_arrays = _window_arrays(ds, val_windows, config)

    def val_loss() -> float:
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, VAL_STREAM]))
        return _dataset_loss(model, basis, sched, val_arrays, rng, config)

    initial_val = val_loss()
    optimizer = ad.Adam(dict(model.named_tensors()))

    n_windows = train_arrays[0].shape[0]
    batches_per_epoch = max(1, math.ceil(n_windows / config.batch_size))
    total_steps = config.epochs * batches_per_epoch
    warmup_steps = max(1, int(round(config.warmup_frac * total_steps)))

    def lr_at(step: int) -> float:
        frac = min(1.0, step / warmup_steps)
        return config.lr_start + frac * (config.lr_end - config.lr_start)

    log: list[tuple[int, float, float, float]] = []
    best_val = math.inf
    best_epoch = 0
    best_model = nn.clone_model(model)
    step = 0
    ctx_all, fut_all, feats_all = train_arrays
    for epoch in range(1, config.epochs + 1):
        tic = time.perf_counter()
        order = order_rng.permutation(n_windows)
        epoch_loss = 0.0
        for a in range(0, n_windows, config.batch_size):
            idx = order[a : a + config.batch_size]
            try:
                loss = _batch_loss(
                    model,
                    basis,
                    sched,
                    ctx_all[idx],
                    fut_all[idx],
                    feats_all[idx],
                    draw_rng,
                    config.loss_over_context,
                    config.spectral_time_features,
                )
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericError(f"loss={value}")
                ad.backward(loss)
                step += 1
                optimizer.step(lr_at(step))
            except NumericError as exc:
                raise NumericError(
                    f"training diverged at step {step}: {exc}; "
                    f"lr={lr_at(step):.3e}, beta=({config.beta_start}, {config.beta_end})"
                ) from exc
            epoch_loss += value * len(idx)
        epoch_loss /= n_windows
        vloss = val_loss()
        seconds = time.perf_counter() - tic
        log.append((epoch, epoch_loss, vloss, seconds))
        if vloss < best_val:
            best_val = vloss
            best_epoch = epoch
            best_model = nn.clone_model(model)
    return TrainResult(
        model=best_model,
        log=log,
        best_epoch=best_epoch,
        best_val=best_val,
        initial_val=initial_val,
    )


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def sample_step(
    wave: nn.WaveNetParams,
    sched: NoiseSchedule,
    x_k: np.ndarray,
    k: int,
    h_prev: Tensor,
    basis: FourierBasis,
    e: np.ndarray | None,
    cond_pre: list[Tensor] | None = None,
) -> np.ndarray:
    """One reverse-kernel update from step ``k`` to ``k - 1``.

    At the terminal step (``k == 1``) the additive noise is suppressed
    regardless of the supplied draw.
    """
    sched.check_step(k)
    with ad.no_grad():
        eps_hat = nn.predict_noise(
            wave, basis, Tensor(x_k, _check=False), k, h_prev, cond_pre
        ).data
    beta = sched.beta[k - 1]
    ab = sched.alpha_bar[k - 1]
    out = (x_k - (beta / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(1.0 - beta)
    if k > 1 and e is not None:
        out = out + sched.sigma[k - 1] * e
    return out


def _reverse_chain(
    wave: nn.WaveNetParams,
    sched: NoiseSchedule,
    basis: FourierBasis,
    cond_pre: list[Tensor],
    noise_block: np.ndarray,
) -> np.ndarray:
    """Run the full reverse chain on a stacked noise block.

    ``noise_block`` has shape ``(..., K, N)``: entry 0 seeds the chain, entry
    ``K - k + 1`` is the additive noise used at step ``k`` (unused at k=1).
    Returns the denoised spectral samples ``(..., N)``.
    """
    k_total = sched.num_steps
    x = np.ascontiguousarray(noise_block[..., 0, :])[..., None]
    for k in range(k_total, 0, -1):
        e = noise_block[..., k_total - k + 1, :][..., None] if k > 1 else None
        x = sample_step(wave, sched, x, k, None, basis, e, cond_pre=cond_pre)
        if not np.all(np.isfinite(x)):
            raise NumericError(f"reverse chain produced non-finite values at step {k}")
    return x[..., 0]


def run_reverse_chain(
    wave: nn.WaveNetParams,
    sched: NoiseSchedule,
    basis: FourierBasis,
    h_prev: Tensor,
    noise_block: np.ndarray,
) -> np.ndarray:
    """Single-condition reverse chain (testing / toy targets).

    ``h_prev`` has shape (N, hidden); ``noise_block`` is ``(S, K, N)``.
    """
    with ad.no_grad():
        conds = nn.wave_condition(wave, basis, h_prev)
    return _reverse_chain(wave, sched, basis, conds, noise_block)


def _chain_noise(seed: int, window_start: int, t_index: int, s: int, k: int, n: int) -> np.ndarray:
    """Seeded noise block for one (window, time point): shape (S, K, N).

    Sample ``s`` owns row ``s``, so chain results are independent of how the
    sampler batches windows or chains.
    """
    rng = np.random.default_rng(
        np.random.SeedSequence([CHAIN_STREAM, seed, window_start, t_index])
    )
    return rng.standard_normal((s, k, n))


def forecast(
    model: ModelParams,
    sched: NoiseSchedule,
    ds: StgDataset,
    window: SeriesWindow,
    config: TrainerConfig,
    seed: int | None = None,
) -> ForecastResult:
    """Probabilistic forecast for one window (see :func:`forecast_windows`)."""
    return forecast_windows(model, sched, ds, [window], config, seed=seed)[0]


def forecast_windows(
    model: ModelParams,
    sched: NoiseSchedule,
    ds: StgDataset,
    windows: list[SeriesWindow],
    config: TrainerConfig,
    seed: int | None = None,
    chunk_size: int = 16,
) -> list[ForecastResult]:
    """Autoregressive sampling over a list of windows.

    For each future time point, ``num_samples`` reverse chains run from
    white noise under the current hidden condition; their spectral mean is
    reconstructed as the point prediction and fed back into the encoder.
    Windows are processed in chunks for speed; results are chunk-invariant
    because every (window, time point) pair owns its own noise stream.
    """
    if config.num_samples < 1:
        raise ConfigError(f"num_samples must be >= 1, got {config.num_samples}")
    if ds.stats is None:
        raise ConfigError("dataset is not normalized; run split_and_normalize first")
    if seed is None:
        seed = config.seed
    basis = ds.basis()
    s_count = config.num_samples
    k_total = sched.num_steps
    n = ds.num_nodes
    f = config.horizon
    results: list[ForecastResult] = []
    scales = feature_scales(ds, config.feature_flags)

    with ad.no_grad():
        for a in range(0, len(windows), chunk_size):
            chunk = windows[a : a + chunk_size]
            wc = len(chunk)
            ctx = np.stack([to_spectral(ds, w).context for w in chunk])
            feats = np.stack(
                [scale_feature_codes(w.time_features, scales) for w in chunk]
            )
            inputs = build_encoder_inputs(
                basis, ctx, feats[:, : config.context_len, :], config.spectral_time_features
            )
            h = nn.run_encoder(model.gru, model.gru_filters, basis, inputs)[-1]

            spec_samples = np.empty((wc, s_count, n, f))
            spec_means = np.empty((wc, n, f))
            for i in range(f):
                conds = nn.wave_condition(model.wave, basis, h)
                cond_views = [
                    Tensor(
                        np.broadcast_to(
                            c.data[:, None, :, :], (wc, s_count, n, c.shape[-1])
                        ),
                        _check=False,
                    )
                    for c in conds
                ]
                noise = np.stack(
                    [
                        _chain_noise(seed, w.future_start, i, s_count, k_total, n)
                        for w in chunk
                    ]
                )
                x0 = _reverse_chain(model.wave, sched, basis, cond_views, noise)
                spec_samples[:, :, :, i] = x0
                mean = x0.mean(axis=1)
                spec_means[:, :, i] = mean
                if i + 1 < f:
                    feat_row = feats[:, config.context_len + i, :]
                    step_in = np.concatenate(
                        [
                            mean[..., None],
                            _feature_block(basis, feat_row, config.spectral_time_features),
                        ],
                        axis=-1,
                    )
                    h = nn.gru_step(
                        model.gru, model.gru_filters, basis, Tensor(step_in, _check=False), h
                    )

            u = basis.eigvecs
            recon_samples = np.einsum("ij,wsjf->wsif", u, spec_samples, optimize=True)
            recon_means = np.einsum("ij,wjf->wif", u, spec_means, optimize=True)
            for wi, w in enumerate(chunk):
                results.append(
                    ForecastResult(
                        window_start=w.future_start,
                        samples=denormalize_values(recon_samples[wi], ds.stats),
                        spectral_means=spec_means[wi],
                        predictions=denormalize_values(recon_means[wi], ds.stats),
                    )
                )
    return results
