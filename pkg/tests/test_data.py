"""Dataset loading, splits, normalization, windowing, and synthesis."""

import numpy as np
import pytest

import specdiff.data as dp
from specdiff.errors import ConfigError, DataFormatError
from specdiff.graph import fourier_transform


def toy_dataset(n=4, t=120, seed=0):
    ds = dp.synth_dataset(n, max(t, 200), seed=seed)
    ds.values = ds.values[:, :t]
    return ds


class TestLoadDataset:
    def test_toy_csv(self, tmp_path):
        values = np.arange(20.0).reshape(2, 10)
        vp, gp = tmp_path / "v.csv", tmp_path / "g.csv"
        dp.write_values_csv(values, str(vp))
        gp.write_text("from,to,cost\n0,1,3.5\n")
        ds = dp.load_dataset(str(vp), str(gp))
        assert ds.num_nodes == 2 and ds.num_steps == 10
        assert np.array_equal(ds.values, values)

    def test_pems_shaped_dimensions(self, tmp_path):
        for n, t in ((307, 160), (170, 150)):
            rng = np.random.default_rng(n)
            vp = tmp_path / f"v{n}.csv"
            gp = tmp_path / f"g{n}.csv"
            dp.write_values_csv(rng.normal(size=(n, t)), str(vp))
            lines = ["from,to,cost"] + [f"{i},{i + 1},1.0" for i in range(n - 1)]
            gp.write_text("\n".join(lines) + "\n")
            ds = dp.load_dataset(str(vp), str(gp))
            assert ds.num_nodes == n and ds.num_steps == t

    def test_ragged_rows_rejected(self, tmp_path):
        p = tmp_path / "v.csv"
        p.write_text("1,2,3\n4,5\n")
        with pytest.raises(DataFormatError, match="ragged"):
            dp.load_values_csv(str(p))

    def test_nonfinite_cells_reported(self, tmp_path):
        p = tmp_path / "v.csv"
        p.write_text("1,2\nnan,4\n")
        with pytest.raises(DataFormatError, match=r"row 2, col 1"):
            dp.load_values_csv(str(p))

    def test_node_mismatch(self, tmp_path):
        vp, gp = tmp_path / "v.csv", tmp_path / "g.csv"
        dp.write_values_csv(np.ones((2, 10)), str(vp))
        gp.write_text("from,to,cost\n0,1,1\n1,2,1\n")
        with pytest.raises(DataFormatError, match="nodes"):
            dp.load_dataset(str(vp), str(gp))


class TestSplitAndNormalize:
    def test_exact_arithmetic(self):
        ds = toy_dataset(t=200)
        ds.values = ds.values[:, :100]
        splits, _ = dp.split_and_normalize(ds)
        assert splits.train == (0, 60)
        assert splits.val == (60, 80)
        assert splits.test == (80, 100)

    def test_stats_from_train_slice_only(self):
        ds = toy_dataset(t=300)
        splits, stats = dp.split_and_normalize(ds)
        a, b = splits.train
        assert stats.mean == pytest.approx(float(ds.values[:, a:b].mean()), abs=0)
        assert stats.std == pytest.approx(float(ds.values[:, a:b].std()), abs=0)

    def test_constant_dataset_guard(self):
        ds = toy_dataset(t=200)
        ds.values = np.full_like(ds.values, 7.25)
        _, stats = dp.split_and_normalize(ds)
        assert stats.std == 1.0
        assert np.abs(ds.normalized()).max() == 0.0

    def test_round_trip_affine(self):
        ds = toy_dataset(t=240)
        _, stats = dp.split_and_normalize(ds)
        back = dp.denormalize_values(dp.normalize_values(ds.values, stats), stats)
        assert np.abs(back - ds.values).max() <= 1e-12 * np.abs(ds.values).max()

    def test_short_split_rejected(self):
        ds = toy_dataset(t=200)
        ds.values = ds.values[:, :50]
        with pytest.raises(ConfigError):
            dp.split_and_normalize(ds, min_len=24)

    def test_bad_ratios_rejected(self):
        ds = toy_dataset(t=200)
        with pytest.raises(ConfigError):
            dp.split_and_normalize(ds, ratios=(0.5, 0.2, 0.2))


class TestWindows:
    def test_exact_counts(self):
        ds = toy_dataset(t=224)
        dp.split_and_normalize(ds)
        assert len(dp.make_windows(ds, (0, 24), 12, 12)) == 1
        assert len(dp.make_windows(ds, (0, 25), 12, 12)) == 2

    def test_count_formula_random_sweep(self):
        ds = toy_dataset(n=3, t=400)
        dp.split_and_normalize(ds)
        rng = np.random.default_rng(0)
        for _ in range(50):
            c = int(rng.integers(1, 10))
            f = int(rng.integers(1, 10))
            stride = int(rng.integers(1, 5))
            length = int(rng.integers(c + f, 120))
            windows = dp.make_windows(ds, (0, length), c, f, stride)
            assert len(windows) == (length - c - f) // stride + 1
            for w in windows:
                assert w.context.shape == (3, c)
                assert w.future.shape == (3, f)
                # consecutiveness: context ends exactly where future begins
                norm = ds.normalized()
                s = w.start
                assert np.array_equal(w.context, norm[:, s : s + c])
                assert np.array_equal(w.future, norm[:, s + c : s + c + f])

    def test_time_feature_codes(self):
        ds = toy_dataset(t=600)
        dp.split_and_normalize(ds)
        w = dp.make_windows(ds, (0, 600), 12, 12)[0]
        feats = w.time_features
        assert feats.shape == (24, 3)
        assert feats[0].tolist() == [0, 0, 0]  # Monday 2018-01-01 00:00
        assert feats[1].tolist() == [0, 0, 1]
        assert feats.dtype == np.int64

    def test_feature_toggles(self):
        ds = toy_dataset(t=300)
        dp.split_and_normalize(ds)
        w = dp.make_windows(ds, (0, 60), 6, 6, use_week_of_month=False)[0]
        assert w.time_features.shape == (12, 2)
        w = dp.make_windows(
            ds, (0, 60), 6, 6,
            use_day_of_week=False, use_week_of_month=False, use_time_of_day=False,
        )[0]
        assert w.time_features.shape == (12, 0)


class TestSpectralWindows:
    def test_round_trip_and_oracle(self):
        ds = toy_dataset(n=6, t=300)
        dp.split_and_normalize(ds)
        w = dp.make_windows(ds, (0, 60), 8, 8)[0]
        spec = dp.to_spectral(ds, w)
        basis = ds.basis()
        assert np.array_equal(spec.context, fourier_transform(basis, w.context))
        back = basis.eigvecs @ spec.future
        assert np.abs(back - w.future).max() <= 1e-9

    def test_constant_column_concentrates_on_dc(self):
        # On a regular graph the normalized-Laplacian kernel is the constant
        # vector, so a constant signal lands entirely on the zero eigenvalue.
        from specdiff.graph import build_graph

        n = 6
        ring = build_graph([(i, (i + 1) % n, 1.0) for i in range(n)], n)
        ds = dp.StgDataset(
            values=np.random.default_rng(0).normal(50, 5, size=(n, 300)),
            interval_minutes=5,
            start=dp.DEFAULT_START,
            graph=ring,
        )
        dp.split_and_normalize(ds)
        w = dp.make_windows(ds, (0, 60), 4, 4)[0]
        w.context[:, 0] = 1.0
        spec = dp.to_spectral(ds, w)
        col = spec.context[:, 0]
        assert abs(ds.basis().eigvals[0]) <= 1e-10
        assert np.abs(col[1:]).max() <= 1e-9 * abs(col[0])

    def test_zero_window_zero_spectrum(self):
        ds = toy_dataset(n=4, t=300)
        dp.split_and_normalize(ds)
        w = dp.make_windows(ds, (0, 60), 4, 4)[0]
        w.context[:] = 0.0
        w.future[:] = 0.0
        spec = dp.to_spectral(ds, w)
        assert np.abs(spec.context).max() == 0.0
        assert np.abs(spec.future).max() == 0.0

    def test_cache_bit_identical(self):
        ds = toy_dataset(n=5, t=300)
        dp.split_and_normalize(ds)
        w = dp.make_windows(ds, (0, 60), 6, 6)[0]
        first = dp.to_spectral(ds, w)
        again = dp.to_spectral(ds, w)
        assert again is first
        fresh = fourier_transform(ds.basis(), w.context)
        assert np.array_equal(first.context, fresh)


class TestSynth:
    def test_seed_reproducibility(self):
        d1 = dp.synth_dataset(8, 400, seed=3)
        d2 = dp.synth_dataset(8, 400, seed=3)
        assert np.array_equal(d1.values, d2.values)
        assert np.array_equal(d1.graph.adjacency, d2.graph.adjacency)

    def test_different_seeds_differ(self):
        d1 = dp.synth_dataset(8, 400, seed=3)
        d2 = dp.synth_dataset(8, 400, seed=4)
        assert not np.array_equal(d1.values, d2.values)

    def test_neighbor_correlation_beats_random_pairs(self):
        adj_med, rand_med = [], []
        for seed in range(20):
            ds = dp.synth_dataset(16, 600, seed=seed)
            corr = np.corrcoef(ds.values)
            a = ds.graph.adjacency > 0
            rng = np.random.default_rng(seed + 1000)
            adjacent = [corr[i, j] for i, j, _ in ds.graph.edges]
            non_adjacent = []
            while len(non_adjacent) < len(adjacent):
                i, j = sorted(rng.integers(0, 16, 2).tolist())
                if i != j and not a[i, j]:
                    non_adjacent.append(corr[i, j])
            adj_med.append(np.median(adjacent))
            rand_med.append(np.median(non_adjacent))
        assert np.median(adj_med) > np.median(rand_med)

    def test_generation_speed(self):
        import time

        tic = time.perf_counter()
        dp.synth_dataset(20, 2000, seed=0)
        assert time.perf_counter() - tic < 1.0

    def test_connected_graph(self):
        ds = dp.synth_dataset(12, 300, seed=5)
        # BFS from node 0 must reach everything
        seen = {0}
        frontier = [0]
        adj = ds.graph.adjacency
        while frontier:
            i = frontier.pop()
            for j in np.nonzero(adj[i])[0]:
                if j not in seen:
                    seen.add(int(j))
                    frontier.append(int(j))
        assert len(seen) == 12

    def test_preconditions(self):
        with pytest.raises(ConfigError):
            dp.synth_dataset(1, 300, seed=0)
        with pytest.raises(ConfigError):
            dp.synth_dataset(8, 100, seed=0)
