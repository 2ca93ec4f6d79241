import os
import sys
import tempfile
import unittest

import numpy as np


ROOT_DIR = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
SCRIPTS_DIR = os.path.join(ROOT_DIR, "scripts")
if SCRIPTS_DIR not in sys.path:
    sys.path.insert(0, SCRIPTS_DIR)

import grid_store  # noqa: E402
from errors import ConfigError, FormatError, InvariantError, RangeError  # noqa: E402


def _ramp_series(T: int, H: int = 3, W: int = 3) -> grid_store.GridSeries:
    data = np.broadcast_to(np.arange(T, dtype=np.float32)[:, None, None], (T, H, W)) + 10.0
    return grid_store.GridSeries(data)


class GridStoreTests(unittest.TestCase):
    def test_round_trip_is_bit_exact_for_random_series(self) -> None:
        rng = np.random.default_rng(3)
        with tempfile.TemporaryDirectory() as tmp_dir:
            path = os.path.join(tmp_dir, "grid.sstgrid")
            for case in range(25):
                with self.subTest(case=case):
                    T, H, W = rng.integers(1, 7, size=3)
                    data = rng.normal(20.0, 3.0, size=(T, H, W)).astype(np.float32)
                    data[rng.random(data.shape) < 0.1] = np.nan
                    series = grid_store.GridSeries(
                        data, lat0=float(rng.uniform(-60, 60)), lon0=float(rng.uniform(-180, 180)), dt_days=1.0
                    )
                    grid_store.save_grid_series(series, path)
                    loaded = grid_store.load_grid_series(path)
                    self.assertEqual(loaded, series)
                    self.assertTrue(np.array_equal(loaded.data.view(np.uint32), data.view(np.uint32)))

    def test_file_layout_is_header_then_float32_payload(self) -> None:
        series = grid_store.generate_synthetic(1, 4, 2, 3, "seasonal")
        with tempfile.TemporaryDirectory() as tmp_dir:
            path = os.path.join(tmp_dir, "grid.sstgrid")
            grid_store.save_grid_series(series, path)
            size = os.path.getsize(path)
            with open(path, "rb") as f:
                magic = f.read(4)
        self.assertEqual(magic, b"SSTG")
        self.assertEqual(size, grid_store.HEADER.size + 4 * 2 * 3 * 4)

    def test_load_rejects_malformed_files(self) -> None:
        series = grid_store.generate_synthetic(1, 3, 2, 2, "eddy")
        with tempfile.TemporaryDirectory() as tmp_dir:
            path = os.path.join(tmp_dir, "grid.sstgrid")
            grid_store.save_grid_series(series, path)
            with open(path, "rb") as f:
                raw = f.read()

            cases = {
                "short": raw[:10],
                "magic": b"XXXX" + raw[4:],
                "version": raw[:4] + (2).to_bytes(4, "little") + raw[8:],
                "truncated": raw[:-4],
                "trailing": raw + b"\x00\x00\x00\x00",
            }
            for name, payload in cases.items():
                with self.subTest(case=name):
                    bad = os.path.join(tmp_dir, f"{name}.sstgrid")
                    with open(bad, "wb") as f:
                        f.write(payload)
                    with self.assertRaises(FormatError):
                        grid_store.load_grid_series(bad)

    def test_missing_file_is_an_io_error(self) -> None:
        with self.assertRaises(OSError):
            grid_store.load_grid_series("/nonexistent/grid.sstgrid")

    def test_grid_series_validates_metadata(self) -> None:
        with self.assertRaises(InvariantError):
            grid_store.GridSeries(np.zeros((2, 2)))
        with self.assertRaises(InvariantError):
            grid_store.GridSeries(np.zeros((2, 2, 2)), dt_days=0.0)
        with self.assertRaises(InvariantError):
            grid_store.GridSeries(np.zeros((2, 2, 2)), lat0=float("nan"))

    def test_synthetic_generation_is_deterministic(self) -> None:
        for kind in grid_store.SYNTHETIC_KINDS:
            with self.subTest(kind=kind):
                a = grid_store.generate_synthetic(7, 12, 8, 8, kind)
                b = grid_store.generate_synthetic(7, 12, 8, 8, kind)
                self.assertEqual(a, b)
                self.assertTrue(np.all(np.isfinite(a.data)))
        with self.assertRaises(ConfigError):
            grid_store.generate_synthetic(7, 12, 8, 8, "tsunami")

    def test_advecting_wave_translates_by_shift(self) -> None:
        series = grid_store.generate_synthetic(5, 6, 10, 10, "advecting_wave", shift=(1.0, 0.0))
        np.testing.assert_allclose(series.data[1:, 1:, :], series.data[:-1, :-1, :], atol=1e-5)

    def test_eddy_moves_by_the_track_step_and_stays_on_the_grid(self) -> None:
        series = grid_store.generate_synthetic(7, 40, 8, 8, "eddy")
        peaks = [np.unravel_index(int(np.argmax(frame)), frame.shape) for frame in series.data]
        for t in range(series.T - 1):
            self.assertEqual(peaks[t + 1], ((peaks[t][0] + 1) % 8, peaks[t][1]))
        spread = series.data.max(axis=(1, 2)) - series.data.min(axis=(1, 2))
        self.assertTrue(np.all(spread > 1.0))

    def test_region_bounds_centers_a_two_degree_box(self) -> None:
        series = grid_store.GridSeries(np.zeros((2, 40, 40), dtype=np.float32), lat0=20.0, lon0=-40.0)
        lat, lon = grid_store.extent_center(series)
        self.assertEqual(grid_store.region_bounds(series, lat, lon, 2.0), (16, 16, 8, 8))
        self.assertEqual(grid_store.region_bounds(series, lat, lon, 1.0)[2:], (4, 4))

        region = grid_store.extract_region(series, lat, lon, 2.0)
        self.assertEqual((region.H, region.W), (8, 8))
        self.assertAlmostEqual(region.lat0, 24.0)
        self.assertAlmostEqual(region.lon0, -36.0)

        with self.assertRaises(RangeError):
            grid_store.region_bounds(series, 20.1, -39.9, 2.0)

    def test_full_extent_region_is_the_series_itself(self) -> None:
        series = grid_store.generate_synthetic(3, 4, 8, 8, "seasonal")
        lat, lon = grid_store.extent_center(series)
        self.assertEqual(grid_store.extract_region(series, lat, lon, 8 * series.dlat), series)

    def test_temporal_split_is_contiguous(self) -> None:
        series = _ramp_series(10)
        train, test = grid_store.temporal_split(series, 0.5)
        self.assertEqual((train.T, test.T), (5, 5))
        self.assertEqual(float(test.data[0, 0, 0]), 15.0)
        self.assertEqual(test.t0, series.t0 + 5.0)
        with self.assertRaises(RangeError):
            grid_store.temporal_split(_ramp_series(1), 0.5)

    def test_sample_windows_builds_hankel_targets(self) -> None:
        series = _ramp_series(20)
        cfg = grid_store.SamplingConfig(M=4, L=3, t_gap=2)
        samples = grid_store.sample_windows(series, cfg)

        self.assertEqual([s.window_start for s in samples], list(range(0, 15, 2)))
        for s in samples:
            self.assertEqual(s.input_frames.shape, (4, 3, 3))
            self.assertEqual(s.delay_target.shape, (3, 4))
            expected = 10.0 + s.window_start + np.arange(3)[:, None] + np.arange(4)[None, :]
            np.testing.assert_array_equal(s.delay_target, expected)
            np.testing.assert_array_equal(s.forecast_truth, 10.0 + s.window_start + 3 + np.arange(3))
            self.assertEqual(s.last_observed, 10.0 + s.window_start + 2)

    def test_sample_windows_count_for_a_hundred_frames(self) -> None:
        cfg = grid_store.SamplingConfig(M=30, L=30, t_gap=5)
        samples = grid_store.sample_windows(_ramp_series(100, 1, 1), cfg, target_index=0)
        self.assertEqual(len(samples), 9)
        self.assertEqual(samples[-1].window_start, 40)

    def test_sample_windows_drops_nan_targets_and_masks_land(self) -> None:
        data = np.array(_ramp_series(20).data)
        data[1, 1, 1] = np.nan  # default target is the center cell
        data[8, 0, 0] = np.nan
        series = grid_store.GridSeries(data)
        samples = grid_store.sample_windows(series, grid_store.SamplingConfig(M=4, L=3, t_gap=2))

        self.assertEqual([s.window_start for s in samples], list(range(2, 15, 2)))
        by_start = {s.window_start: s for s in samples}
        self.assertTrue(by_start[6].land_mask[0, 0])
        self.assertEqual(by_start[6].input_frames[2, 0, 0], 0.0)
        self.assertFalse(by_start[10].land_mask.any())

    def test_sample_windows_subsamples_and_rejects_short_series(self) -> None:
        series = _ramp_series(30)
        samples = grid_store.sample_windows(series, grid_store.SamplingConfig(M=3, L=2, t_gap=1, delta_t=3))
        np.testing.assert_array_equal(samples[0].delay_target, [[10.0, 13.0, 16.0], [13.0, 16.0, 19.0]])
        with self.assertRaises(RangeError):
            grid_store.sample_windows(_ramp_series(5), grid_store.SamplingConfig(M=4, L=3))

    def test_sampling_config_validates_and_reads_config(self) -> None:
        cfg = grid_store.SamplingConfig.from_config({"M": "8", "L": 6, "split_ratio": 0.6, "unknown": 1})
        self.assertEqual((cfg.M, cfg.L, cfg.split_ratio, cfg.span), (8, 6, 0.6, 13))
        with self.assertRaises(ConfigError):
            grid_store.SamplingConfig(M=1)
        with self.assertRaises(ConfigError):
            grid_store.SamplingConfig(split_ratio=1.0)


if __name__ == "__main__":
    unittest.main()
