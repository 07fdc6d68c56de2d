"""Dataset ingestion, normalization, windowing, and synthetic generation.

Values files are CSV with one row per sensor and one column per time step
(no header).  Splits are chronological; Z-score statistics come from the
training range only and are shared across all nodes so that cross-node
magnitude relationships survive the spectral transform.
"""

from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataFormatError, ShapeError
from .graph import (
    FourierBasis,
    StgGraph,
    basis_for_graph,
    build_graph,
    fourier_transform,
    graph_from_distance_file,
)

DEFAULT_START = "2018-01-01T00:00:00"
MINUTES_PER_DAY = 24 * 60


@dataclass
class NormStats:
    """Joint Z-score statistics computed on the training range."""

    mean: float
    std: float


@dataclass
class Splits:
    """Half-open chronological index ranges into the time axis."""

    train: tuple[int, int]
    val: tuple[int, int]
    test: tuple[int, int]


@dataclass
class StgDataset:
    """A univariate sensor time-series matrix bound to its graph."""

    values: np.ndarray          # (N, T) raw, original units
    interval_minutes: int
    start: str                  # ISO timestamp of column 0
    graph: StgGraph
    stats: NormStats | None = None
    _basis: FourierBasis | None = field(default=None, repr=False, compare=False)
    _normalized: np.ndarray | None = field(default=None, repr=False, compare=False)
    _spectral: dict[tuple[int, int], "SpectralWindow"] = field(
        default_factory=dict, repr=False, compare=False
    )

    @property
    def num_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def num_steps(self) -> int:
        return self.values.shape[1]

    def basis(self) -> FourierBasis:
        if self._basis is None:
            self._basis = basis_for_graph(self.graph)
        return self._basis

    def normalized(self) -> np.ndarray:
        if self.stats is None:
            raise ConfigError("dataset has no normalization stats; run split_and_normalize")
        if self._normalized is None:
            self._normalized = normalize_values(self.values, self.stats)
        return self._normalized


@dataclass
class SeriesWindow:
    """A (context, future) pair of normalized node-time matrices.

    ``time_features`` holds integer codes per time step covering context and
    future: day of week, week of month, and time-of-day slot (columns in that
    order, restricted to the enabled features).
    """

    start: int                  # absolute index of the first context column
    context: np.ndarray         # (N, c)
    future: np.ndarray          # (N, f)
    time_features: np.ndarray   # (c + f, F) integer codes

    @property
    def context_len(self) -> int:
        return self.context.shape[1]

    @property
    def horizon(self) -> int:
        return self.future.shape[1]

    @property
    def future_start(self) -> int:
        return self.start + self.context_len


@dataclass
class SpectralWindow:
    """The same window after the graph Fourier transform."""

    start: int
    context: np.ndarray         # (N, c)
    future: np.ndarray          # (N, f)


def normalize_values(values: np.ndarray, stats: NormStats) -> np.ndarray:
    return (values - stats.mean) / stats.std


def denormalize_values(values: np.ndarray, stats: NormStats) -> np.ndarray:
    return values * stats.std + stats.mean


def load_values_csv(path: str) -> np.ndarray:
    """Read the node-by-time values matrix, validating shape and finiteness."""
    rows: list[list[float]] = []
    width: int | None = None
    with open(path, newline="") as fh:
        for ln, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise DataFormatError(
                    f"{path}:{ln}: ragged row ({len(row)} columns, expected {width})"
                )
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{ln}: {exc}") from exc
    if not rows:
        raise DataFormatError(f"{path}: empty values file")
    values = np.asarray(rows, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        bad = np.argwhere(~np.isfinite(values))[:10]
        cells = ", ".join(f"(row {r + 1}, col {c + 1})" for r, c in bad)
        raise DataFormatError(f"{path}: non-finite entries at {cells}")
    return values


def load_dataset(
    values_path: str,
    graph_path: str,
    interval_minutes: int = 5,
    start: str = DEFAULT_START,
    weighted_graph: bool = False,
) -> StgDataset:
    """Load raw values plus the distance-file graph; no normalization yet."""
    values = load_values_csv(values_path)
    graph = graph_from_distance_file(graph_path, num_nodes=None, weighted=weighted_graph)
    if graph.num_nodes < values.shape[0]:
        # Distance files omit trailing isolated sensors; widen to the data.
        graph = build_graph(
            [(i, j, w) for i, j, w in graph.edges], values.shape[0], symmetrize=True
        )
    if graph.num_nodes != values.shape[0]:
        raise DataFormatError(
            f"graph has {graph.num_nodes} nodes but values file has {values.shape[0]} rows"
        )
    return StgDataset(
        values=values,
        interval_minutes=interval_minutes,
        start=start,
        graph=graph,
    )


def split_and_normalize(
    ds: StgDataset,
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2),
    min_len: int | None = None,
) -> tuple[Splits, NormStats]:
    """Chronological train/val/test split plus train-only Z-score stats.

    ``min_len`` (usually context + horizon) triggers a config error when any
    split is too short to hold one window.  A near-constant training range
    substitutes unit scale.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {ratios}")
    t = ds.num_steps
    i1 = int(math.floor(t * ratios[0]))
    i2 = int(math.floor(t * (ratios[0] + ratios[1])))
    splits = Splits(train=(0, i1), val=(i1, i2), test=(i2, t))
    if min_len is not None:
        for name, (a, b) in (("train", splits.train), ("val", splits.val), ("test", splits.test)):
            if b - a < min_len:
                raise ConfigError(
                    f"{name} split has {b - a} steps, needs at least {min_len}"
                )
    train_vals = ds.values[:, :i1]
    mean = float(train_vals.mean())
    std = float(train_vals.std())
    if std < 1e-12:
        std = 1.0
    stats = NormStats(mean=mean, std=std)
    ds.stats = stats
    ds._normalized = None
    ds._spectral.clear()
    return splits, stats


def _timestamp(ds: StgDataset, index: int) -> dt.datetime:
    base = dt.datetime.fromisoformat(ds.start)
    return base + dt.timedelta(minutes=index * ds.interval_minutes)


def time_feature_codes(
    ds: StgDataset,
    start: int,
    length: int,
    use_day_of_week: bool = True,
    use_week_of_month: bool = True,
    use_time_of_day: bool = True,
) -> np.ndarray:
    """Integer time-feature codes for ``length`` steps from ``start``."""
    cols: list[list[int]] = []
    for idx in range(start, start + length):
        ts = _timestamp(ds, idx)
        row: list[int] = []
        if use_day_of_week:
            row.append(ts.weekday())
        if use_week_of_month:
            row.append((ts.day - 1) // 7)
        if use_time_of_day:
            row.append((ts.hour * 60 + ts.minute) // ds.interval_minutes)
        cols.append(row)
    return np.asarray(cols, dtype=np.int64).reshape(length, -1)


def feature_scales(ds: StgDataset, enabled: tuple[bool, bool, bool]) -> np.ndarray:
    """Min-max denominators matching :func:`time_feature_codes` columns."""
    slots = max(MINUTES_PER_DAY // ds.interval_minutes - 1, 1)
    all_scales = [6.0, 4.0, float(slots)]
    return np.asarray([s for s, on in zip(all_scales, enabled) if on])


def make_windows(
    ds: StgDataset,
    split: tuple[int, int],
    context_len: int,
    horizon: int,
    stride: int = 1,
    use_day_of_week: bool = True,
    use_week_of_month: bool = True,
    use_time_of_day: bool = True,
) -> list[SeriesWindow]:
    """Sliding normalized windows fully inside the split range."""
    a, b = split
    total = context_len + horizon
    if b - a < total:
        raise ConfigError(f"split of length {b - a} cannot hold a {total}-step window")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    normalized = ds.normalized()
    windows: list[SeriesWindow] = []
    count = (b - a - total) // stride + 1
    for w in range(count):
        s = a + w * stride
        feats = time_feature_codes(
            ds,
            s,
            total,
            use_day_of_week=use_day_of_week,
            use_week_of_month=use_week_of_month,
            use_time_of_day=use_time_of_day,
        )
        windows.append(
            SeriesWindow(
                start=s,
                context=normalized[:, s : s + context_len],
                future=normalized[:, s + context_len : s + total],
                time_features=feats,
            )
        )
    return windows


def window_truth(ds: StgDataset, window: SeriesWindow) -> np.ndarray:
    """Original-unit future values for a window (for evaluation)."""
    s = window.future_start
    return ds.values[:, s : s + window.horizon]


def to_spectral(ds: StgDataset, window: SeriesWindow) -> SpectralWindow:
    """Graph Fourier transform of a normalized window, memoized per window."""
    key = (window.start, window.context_len)
    cached = ds._spectral.get(key)
    if cached is not None:
        return cached
    basis = ds.basis()
    spec = SpectralWindow(
        start=window.start,
        context=fourier_transform(basis, window.context),
        future=fourier_transform(basis, window.future),
    )
    ds._spectral[key] = spec
    return spec


def synth_dataset(
    num_nodes: int,
    num_steps: int,
    seed: int,
    interval_minutes: int = 5,
    start: str = DEFAULT_START,
    dynamics: str = "diffused-AR",
) -> StgDataset:
    """Seeded synthetic sensor network for desk-scale runs.

    The graph is a ring with random chords (always connected).  Node series
    follow an AR(2) process coupled through one step of neighbor averaging
    per tick, plus a node-phased daily periodic component and Gaussian noise.
    """
    if num_nodes < 2:
        raise ConfigError(f"synthetic dataset needs at least 2 nodes, got {num_nodes}")
    if num_steps < 200:
        raise ConfigError(f"synthetic dataset needs at least 200 steps, got {num_steps}")
    if dynamics != "diffused-AR":
        raise ConfigError(f"unknown dynamics {dynamics!r}")
    rng = np.random.default_rng(seed)

    edges: list[tuple[int, int, float]] = []
    for i in range(num_nodes):
        edges.append((i, (i + 1) % num_nodes, 1.0 + float(rng.uniform(0.0, 1.0))))
    n_chords = max(1, num_nodes // 4)
    added = 0
    attempts = 0
    chord_set = set()
    while added < n_chords and attempts < 50 * n_chords:
        attempts += 1
        i, j = sorted(rng.integers(0, num_nodes, size=2).tolist())
        if j - i <= 1 or (i == 0 and j == num_nodes - 1) or (i, j) in chord_set:
            continue
        chord_set.add((i, j))
        edges.append((i, j, 2.0 + float(rng.uniform(0.0, 2.0))))
        added += 1
    graph = build_graph(edges, num_nodes, symmetrize=True, threshold=math.inf)

    # Row-normalized adjacency spreads each node's signal to its neighbors.
    deg = np.maximum(graph.degree, 1.0)
    mix = graph.adjacency / deg[:, None]

    a1, a2 = 0.60, 0.15
    noise_std = 2.0
    couple = 0.5
    burn = 300
    total = num_steps + burn
    u = np.zeros((num_nodes, total))
    u[:, 0] = rng.normal(0.0, noise_std, size=num_nodes)
    u[:, 1] = rng.normal(0.0, noise_std, size=num_nodes)
    shocks = rng.normal(0.0, noise_std, size=(num_nodes, total))
    for t in range(2, total):
        v1 = (1.0 - couple) * u[:, t - 1] + couple * (mix @ u[:, t - 1])
        v2 = (1.0 - couple) * u[:, t - 2] + couple * (mix @ u[:, t - 2])
        u[:, t] = a1 * v1 + a2 * v2 + shocks[:, t]
    u = u[:, burn:]

    period = MINUTES_PER_DAY // interval_minutes
    phase = 2.0 * np.pi * np.arange(num_nodes) / num_nodes + rng.normal(0.0, 0.15, num_nodes)
    amp = rng.uniform(4.0, 8.0, size=num_nodes)
    base = 50.0 + rng.normal(0.0, 10.0, size=num_nodes)
    tgrid = 2.0 * np.pi * np.arange(num_steps) / period
    daily = np.sin(tgrid[None, :] + phase[:, None]) + 0.3 * np.sin(
        2.0 * tgrid[None, :] + phase[:, None]
    )
    values = base[:, None] + amp[:, None] * daily + u

    return StgDataset(
        values=values,
        interval_minutes=interval_minutes,
        start=start,
        graph=graph,
    )


def write_values_csv(values: np.ndarray, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in values:
            writer.writerow([repr(float(v)) for v in row])


def write_distance_csv(graph: StgGraph, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["from", "to", "cost"])
        for i, j, w in graph.edges:
            writer.writerow([i, j, repr(float(w))])
